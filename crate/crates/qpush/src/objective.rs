//! Local objectives for decentralized optimization.
//!
//! Each node i holds a private objective F_i; the network minimizes the
//! average F(x) = (1/n) sum_i F_i(x). Two families are provided:
//!
//! - **Least squares** (convex): F_i(x) = (1/2m) sum_j ||x - zeta_ij||^2
//!   over m local anchor points. The global optimum is the grand mean of all
//!   anchors, the gradient is 1-Lipschitz, and stochastic gradients pick one
//!   anchor uniformly.
//! - **Sigmoid net** (nonconvex): a two-layer scalar-output network
//!   yhat = v . sigmoid(W1 u + b1) + b2 with squared loss against synthetic
//!   two-cluster data. Parameters are flattened as [W1 row-major, b1, v, b2].
//!
//! Both generate their data deterministically from the master seed via the
//! crate's stream addressing, so an objective preset is fully reproducible.
//! Constants used by the theory bounds (Lipschitz modulus L, gradient second
//! moment D^2, gradient variance sigma^2) are analytic where available and
//! otherwise estimated by documented probe procedures; estimates are flagged.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, GLOBAL};

/// One node's local objective.
pub trait Objective: Send + Sync {
    /// Parameter dimension.
    fn dim(&self) -> usize;
    /// Full local gradient (all local samples).
    fn full_gradient(&self, x: &[f64]) -> Vec<f64>;
    /// Unbiased stochastic gradient: one local sample picked uniformly.
    fn sample_gradient(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Full local loss.
    fn loss(&self, x: &[f64]) -> f64;
}

// ---------------------------------------------------------------------------
// Least squares
// ---------------------------------------------------------------------------

/// F(x) = (1/2m) sum_j ||x - zeta_j||^2 with local mean cached.
pub struct LeastSquares {
    data: Vec<Vec<f64>>,
    local_mean: Vec<f64>,
}

/// Build a least-squares node objective from its anchor points.
pub fn least_squares_objective(data: Vec<Vec<f64>>) -> Result<LeastSquares> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = data[0].len();
    if d == 0 {
        return Err(Error::EmptyDataset);
    }
    if let Some(bad) = data.iter().find(|row| row.len() != d) {
        return Err(Error::DimensionMismatch {
            what: "least-squares anchor",
            expected: d,
            got: bad.len(),
        });
    }
    let m = data.len() as f64;
    let mut local_mean = vec![0.0; d];
    for row in &data {
        for (acc, v) in local_mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut local_mean {
        *v /= m;
    }
    Ok(LeastSquares { data, local_mean })
}

impl LeastSquares {
    pub fn local_mean(&self) -> &[f64] {
        &self.local_mean
    }
    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.data
    }
}

impl Objective for LeastSquares {
    fn dim(&self) -> usize {
        self.local_mean.len()
    }

    fn full_gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.local_mean).map(|(a, b)| a - b).collect()
    }

    fn sample_gradient(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let j = rng.gen_range(0..self.data.len());
        x.iter().zip(&self.data[j]).map(|(a, b)| a - b).collect()
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let m = self.data.len() as f64;
        self.data
            .iter()
            .map(|row| {
                0.5 * x
                    .iter()
                    .zip(row)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / m
    }
}

// ---------------------------------------------------------------------------
// Two-layer sigmoid network
// ---------------------------------------------------------------------------

/// yhat(u) = v . sigmoid(W1 u + b1) + b2, squared loss 1/2 (yhat - y)^2
/// averaged over the local samples. Parameter layout:
/// [W1 row-major (h*p), b1 (h), v (h), b2 (1)], dim = h*p + 2h + 1.
pub struct SigmoidNet {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    hidden: usize,
    input_dim: usize,
}

/// Build a sigmoid-net node objective from its labelled samples.
pub fn nonconvex_objective(
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    hidden: usize,
) -> Result<SigmoidNet> {
    if inputs.is_empty() || hidden == 0 {
        return Err(Error::EmptyDataset);
    }
    if inputs.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            what: "sigmoid-net targets",
            expected: inputs.len(),
            got: targets.len(),
        });
    }
    let p = inputs[0].len();
    if p == 0 {
        return Err(Error::EmptyDataset);
    }
    if let Some(bad) = inputs.iter().find(|row| row.len() != p) {
        return Err(Error::DimensionMismatch {
            what: "sigmoid-net input",
            expected: p,
            got: bad.len(),
        });
    }
    Ok(SigmoidNet {
        inputs,
        targets,
        hidden,
        input_dim: p,
    })
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

impl SigmoidNet {
    fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], f64) {
        let (h, p) = (self.hidden, self.input_dim);
        let w1 = &x[0..h * p];
        let b1 = &x[h * p..h * p + h];
        let v = &x[h * p + h..h * p + 2 * h];
        let b2 = x[h * p + 2 * h];
        (w1, b1, v, b2)
    }

    /// Forward pass on one sample: (activations, residual yhat - y).
    fn forward(&self, x: &[f64], j: usize) -> (Vec<f64>, f64) {
        let (w1, b1, v, b2) = self.split(x);
        let u = &self.inputs[j];
        let mut act = Vec::with_capacity(self.hidden);
        let mut yhat = b2;
        for k in 0..self.hidden {
            let row = &w1[k * self.input_dim..(k + 1) * self.input_dim];
            let pre: f64 = row.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() + b1[k];
            let a = sigmoid(pre);
            yhat += v[k] * a;
            act.push(a);
        }
        (act, yhat - self.targets[j])
    }

    /// Accumulate the gradient of the sample-j loss into `grad`.
    fn accumulate_sample_gradient(&self, x: &[f64], j: usize, scale: f64, grad: &mut [f64]) {
        let (h, p) = (self.hidden, self.input_dim);
        let (_, _, v, _) = self.split(x);
        let (act, r) = self.forward(x, j);
        let u = &self.inputs[j];
        for k in 0..h {
            let dpre = r * v[k] * act[k] * (1.0 - act[k]);
            for l in 0..p {
                grad[k * p + l] += scale * dpre * u[l];
            }
            grad[h * p + k] += scale * dpre; // b1
            grad[h * p + h + k] += scale * r * act[k]; // v
        }
        grad[h * p + 2 * h] += scale * r; // b2
    }
}

impl Objective for SigmoidNet {
    fn dim(&self) -> usize {
        self.hidden * self.input_dim + 2 * self.hidden + 1
    }

    fn full_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.dim()];
        let scale = 1.0 / self.inputs.len() as f64;
        for j in 0..self.inputs.len() {
            self.accumulate_sample_gradient(x, j, scale, &mut grad);
        }
        grad
    }

    fn sample_gradient(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let j = rng.gen_range(0..self.inputs.len());
        let mut grad = vec![0.0; self.dim()];
        self.accumulate_sample_gradient(x, j, 1.0, &mut grad);
        grad
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for j in 0..self.inputs.len() {
            let (_, r) = self.forward(x, j);
            total += 0.5 * r * r;
        }
        total / self.inputs.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Objective sets (one objective per node) and presets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ObjectiveKind {
    LeastSquares,
    SigmoidNet,
}

/// The per-node objectives of one experiment plus the constants the theory
/// bounds consume. `lipschitz` is `None` when no analytic modulus exists
/// (sigmoid net); callers then use [`ObjectiveSet::estimate_lipschitz`].
pub struct ObjectiveSet {
    pub nodes: Vec<Box<dyn Objective>>,
    pub kind: ObjectiveKind,
    pub optimum: Option<Vec<f64>>,
    pub optimal_value: Option<f64>,
    pub lipschitz: Option<f64>,
    /// Estimate of D^2 = max_i E||grad F_i(x, zeta)||^2 near the solution
    /// region (analytic at the optimum for least squares, probed otherwise).
    pub d_sq_est: f64,
    /// Estimate of sigma^2 = max_i E||grad F_i(x,zeta) - grad F_i(x)||^2
    /// (exact for least squares, where it is x-independent).
    pub sigma_sq_est: f64,
}

impl ObjectiveSet {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].dim()
    }

    /// Global loss F(x) = (1/n) sum_i F_i(x).
    pub fn global_loss(&self, x: &[f64]) -> f64 {
        self.nodes.iter().map(|o| o.loss(x)).sum::<f64>() / self.n() as f64
    }

    /// Global full gradient (1/n) sum_i grad F_i(x).
    pub fn global_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for o in &self.nodes {
            for (acc, v) in g.iter_mut().zip(o.full_gradient(x)) {
                *acc += v;
            }
        }
        let nf = self.n() as f64;
        for v in &mut g {
            *v /= nf;
        }
        g
    }

    /// Optimality gap F(x) - F*; falls back to the raw loss when the optimal
    /// value is unknown (nonconvex objectives).
    pub fn gap(&self, x: &[f64]) -> f64 {
        match self.optimal_value {
            Some(fstar) => self.global_loss(x) - fstar,
            None => self.global_loss(x),
        }
    }

    /// Probe-based Lipschitz estimate: the supremum of the gradient
    /// difference ratio ||grad F(a) - grad F(b)|| / ||a - b|| over 50
    /// deterministic random pairs near the origin. Exact (= L) for
    /// quadratics; a lower estimate for general objectives.
    pub fn estimate_lipschitz(&self, master_seed: u64) -> f64 {
        let d = self.dim();
        let mut rng = stream(master_seed, GLOBAL, 0, Purpose::Probe);
        let mut l_hat: f64 = 0.0;
        for _ in 0..50 {
            let a: Vec<f64> = (0..d)
                .map(|_| 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            let b: Vec<f64> = a
                .iter()
                .map(|v| v + 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            let ga = self.global_gradient(&a);
            let gb = self.global_gradient(&b);
            let num: f64 = ga
                .iter()
                .zip(&gb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let den: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if den > 0.0 {
                l_hat = l_hat.max(num / den);
            }
        }
        l_hat
    }

    /// Empirical bounded-variance check: for each node, the mean squared
    /// deviation of 1000 stochastic gradients from the full gradient at the
    /// probe point x = 0. Returns the worst node's value.
    pub fn variance_probe(&self, master_seed: u64) -> f64 {
        let d = self.dim();
        let x = vec![0.0; d];
        let mut worst: f64 = 0.0;
        for (i, o) in self.nodes.iter().enumerate() {
            let full = o.full_gradient(&x);
            let mut acc = 0.0;
            for trial in 0..1000u64 {
                let mut rng = stream(master_seed, i, trial, Purpose::Probe);
                let g = o.sample_gradient(&x, &mut rng);
                acc += g
                    .iter()
                    .zip(&full)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            worst = worst.max(acc / 1000.0);
        }
        worst
    }
}

/// Least-squares preset: node i holds m anchors zeta_ij = zeta* + N(0, I_d)
/// where zeta* = 100 * U[0,1]^d is a shared offset. The spread of local
/// means across nodes is what consensus must overcome.
pub fn least_squares_set(n: usize, m: usize, d: usize, master_seed: u64) -> Result<ObjectiveSet> {
    least_squares_set_scaled(n, m, d, master_seed, 100.0)
}

/// Least-squares preset with configurable offset scale. Scale 0 keeps all
/// data at unit magnitude, which the oracle equivalence checks use so that
/// engine/oracle drift stays far below the comparison tolerance.
pub fn least_squares_set_scaled(
    n: usize,
    m: usize,
    d: usize,
    master_seed: u64,
    offset_scale: f64,
) -> Result<ObjectiveSet> {
    if n == 0 || m == 0 || d == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut global = stream(master_seed, GLOBAL, 0, Purpose::Init);
    let zstar: Vec<f64> = (0..d).map(|_| offset_scale * global.gen::<f64>()).collect();
    let mut nodes: Vec<Box<dyn Objective>> = Vec::with_capacity(n);
    let mut anchors_all: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(master_seed, i, 0, Purpose::Init);
        let data: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..d)
                    .map(|c| {
                        zstar[c]
                            + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    })
                    .collect()
            })
            .collect();
        anchors_all.push(data.clone());
        nodes.push(Box::new(least_squares_objective(data)?));
    }

    // Global optimum: grand mean of all anchors (equal weights).
    let mut opt = vec![0.0; d];
    for node in &anchors_all {
        for row in node {
            for (acc, v) in opt.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let total = (n * m) as f64;
    for v in &mut opt {
        *v /= total;
    }

    // F* and the theory constants, all analytic for quadratics.
    let mut fstar = 0.0;
    let mut d_sq: f64 = 0.0;
    let mut sigma_sq: f64 = 0.0;
    for node in &anchors_all {
        let mut local_mean = vec![0.0; d];
        for row in node {
            for (acc, v) in local_mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in &mut local_mean {
            *v /= m as f64;
        }
        let mut node_fstar = 0.0;
        let mut node_dsq = 0.0;
        let mut node_var = 0.0;
        for row in node {
            let sq_opt: f64 = opt.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            let sq_mean: f64 = local_mean
                .iter()
                .zip(row)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            node_fstar += 0.5 * sq_opt;
            node_dsq += sq_opt;
            node_var += sq_mean;
        }
        fstar += node_fstar / m as f64;
        d_sq = d_sq.max(node_dsq / m as f64);
        sigma_sq = sigma_sq.max(node_var / m as f64);
    }
    fstar /= n as f64;

    Ok(ObjectiveSet {
        nodes,
        kind: ObjectiveKind::LeastSquares,
        optimum: Some(opt),
        optimal_value: Some(fstar),
        lipschitz: Some(1.0),
        d_sq_est: d_sq,
        sigma_sq_est: sigma_sq,
    })
}

/// Sigmoid-net preset: two Gaussian clusters in R^p with centers 2*N(0,I)
/// shared across nodes; each node draws `samples` points, label b in {0,1}
/// uniform, input = c_b + N(0, I_p). Network width `hidden`.
pub fn sigmoid_net_set(
    n: usize,
    hidden: usize,
    input_dim: usize,
    samples: usize,
    master_seed: u64,
) -> Result<ObjectiveSet> {
    if n == 0 || hidden == 0 || input_dim == 0 || samples == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut global = stream(master_seed, GLOBAL, 0, Purpose::Init);
    let c0: Vec<f64> = (0..input_dim)
        .map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut global))
        .collect();
    let c1: Vec<f64> = (0..input_dim)
        .map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut global))
        .collect();
    let mut nodes: Vec<Box<dyn Objective>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(master_seed, i, 0, Purpose::Init);
        let mut inputs = Vec::with_capacity(samples);
        let mut targets = Vec::with_capacity(samples);
        for _ in 0..samples {
            let label = rng.gen::<f64>() < 0.5;
            let center = if label { &c1 } else { &c0 };
            let point: Vec<f64> = center
                .iter()
                .map(|c| {
                    c + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            inputs.push(point);
            targets.push(if label { 1.0 } else { 0.0 });
        }
        nodes.push(Box::new(nonconvex_objective(inputs, targets, hidden)?));
    }

    // No analytic optimum or modulus; probe the solution region for the
    // reporting constants.
    let mut set = ObjectiveSet {
        nodes,
        kind: ObjectiveKind::SigmoidNet,
        optimum: None,
        optimal_value: None,
        lipschitz: None,
        d_sq_est: 0.0,
        sigma_sq_est: 0.0,
    };
    let dim = set.dim();
    let mut probe = stream(master_seed, GLOBAL, 1, Purpose::Probe);
    let mut d_sq: f64 = 0.0;
    let mut sigma_sq: f64 = 0.0;
    for (i, o) in set.nodes.iter().enumerate() {
        let mut acc_d = 0.0;
        let mut acc_s = 0.0;
        const PROBES: usize = 200;
        for trial in 0..PROBES {
            let x: Vec<f64> = (0..dim)
                .map(|_| {
                    0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut probe)
                })
                .collect();
            let full = o.full_gradient(&x);
            let mut rng = stream(master_seed, i, trial as u64 + 1, Purpose::Probe);
            let g = o.sample_gradient(&x, &mut rng);
            acc_d += g.iter().map(|v| v * v).sum::<f64>();
            acc_s += g
                .iter()
                .zip(&full)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        d_sq = d_sq.max(acc_d / PROBES as f64);
        sigma_sq = sigma_sq.max(acc_s / PROBES as f64);
    }
    set.d_sq_est = d_sq;
    set.sigma_sq_est = sigma_sq;
    Ok(set)
}

/// Parse an objective preset: `lsq:<n>x<m>:<d>` or `mlp:<hidden>:<input_dim>`
/// (sigmoid net fixes 100 samples per node). `expected_n` is the graph size;
/// a least-squares preset must match it.
pub fn parse_objective(text: &str, expected_n: usize, master_seed: u64) -> Result<ObjectiveSet> {
    let bad = |reason: String| Error::ConfigInvalid {
        field: "objective",
        reason,
    };
    if let Some(rest) = text.strip_prefix("lsq:") {
        let (shape, d) = rest
            .rsplit_once(':')
            .ok_or_else(|| bad(format!("expected lsq:<n>x<m>:<d>, got '{text}'")))?;
        let (n, m) = shape
            .split_once('x')
            .ok_or_else(|| bad(format!("expected <n>x<m> in '{text}'")))?;
        let n: usize = n.parse().map_err(|_| bad(format!("bad n in '{text}'")))?;
        let m: usize = m.parse().map_err(|_| bad(format!("bad m in '{text}'")))?;
        let d: usize = d.parse().map_err(|_| bad(format!("bad d in '{text}'")))?;
        if n != expected_n {
            return Err(bad(format!(
                "objective has {n} nodes but the graph has {expected_n}"
            )));
        }
        return least_squares_set(n, m, d, master_seed);
    }
    if let Some(rest) = text.strip_prefix("mlp:") {
        let (h, p) = rest
            .split_once(':')
            .ok_or_else(|| bad(format!("expected mlp:<hidden>:<input_dim>, got '{text}'")))?;
        let h: usize = h.parse().map_err(|_| bad(format!("bad hidden in '{text}'")))?;
        let p: usize = p.parse().map_err(|_| bad(format!("bad input dim in '{text}'")))?;
        return sigmoid_net_set(expected_n, h, p, 100, master_seed);
    }
    Err(bad(format!(
        "unknown objective '{text}' (expected lsq:<n>x<m>:<d> or mlp:<h>:<p>)"
    )))
}

/// Central-difference gradient of a black-box scalar function, used to
/// cross-check analytic gradients.
pub fn central_difference_gradient(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for c in 0..x.len() {
        let orig = xp[c];
        xp[c] = orig + step;
        let fp = f(&xp);
        xp[c] = orig - step;
        let fm = f(&xp);
        xp[c] = orig;
        g[c] = (fp - fm) / (2.0 * step);
    }
    g
}

// ---------------------------------------------------------------------------
