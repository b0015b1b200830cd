//! Directed topologies, column-stochastic mixing matrices, and the
//! empirically estimated mixing constants the convergence bounds consume.
//!
//! The mixing matrix follows the out-degree rule a_ij = 1/d_j^out whenever
//! j -> i is an arc or i = j (every node keeps an implicit self-loop), which
//! makes every column sum to one: applying A preserves the total mass of any
//! vector, the property push-sum relies on.
//!
//! For a strongly connected graph with positive diagonal there is a
//! stochastic vector phi and constants C > 0, lambda in (0,1), delta > 0 with
//!
//! ```text
//!   ||A^t - phi 1^T||  <=  C lambda^t        (geometric mixing)
//!   [A^t 1]_i          >=  delta             (mass never drains from a node)
//! ```
//!
//! Those constants exist but are not given in closed form, so this module
//! estimates them: phi by power iteration, (lambda, C) by an ordinary
//! least-squares line fit of log ||A^t - phi 1^T|| against t, delta by a
//! scan of A^t 1 over the same horizon, and gamma = ||A - I|| by singular
//! value decomposition. The fitted pair is post-processed so the displayed
//! inequality actually holds at every sampled t (C is raised to the observed
//! supremum and inflated by 5%).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Norms below this are considered to have hit the floating-point floor and
/// are excluded from log-domain fitting.
pub const NORM_UNDERFLOW_FLOOR: f64 = 1e-14;

/// Multiplicative safety margin applied to the fitted delta floor; the scan
/// is over a finite horizon while the guarantee is for all t.
const DELTA_MARGIN: f64 = 0.99;

/// Post-fit inflation of the contraction prefactor C.
const C_INFLATION: f64 = 1.05;

// ---------------------------------------------------------------------------
// DirectedGraph
// ---------------------------------------------------------------------------

/// A strongly connected directed graph. Self-loops are implicit at every
/// node and never stored; `edges` holds only the non-self arcs.
#[derive(Debug, Clone)]
pub struct DirectedGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl DirectedGraph {
    /// Build a graph from explicit arcs. Self-loops in the input are
    /// dropped (they are implicit), duplicates are removed, and strong
    /// connectivity is verified.
    pub fn new(n: usize, arcs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::ConfigInvalid {
                field: "graph",
                reason: "node count must be >= 1".into(),
            });
        }
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for (s, d) in arcs {
            if s >= n || d >= n {
                return Err(Error::ConfigInvalid {
                    field: "graph",
                    reason: format!("arc ({s}, {d}) references a node >= {n}"),
                });
            }
            if s != d {
                edges.push((s, d));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let g = Self { n, edges };
        if !g.strongly_connected() {
            return Err(Error::NotStronglyConnected);
        }
        Ok(g)
    }

    /// Directed cycle 0 -> 1 -> ... -> n-1 -> 0.
    pub fn ring(n: usize) -> Result<Self> {
        Self::new(n, (0..n).filter(|_| n > 1).map(|i| (i, (i + 1) % n)))
    }

    /// All ordered pairs of distinct nodes.
    pub fn complete(n: usize) -> Result<Self> {
        let arcs = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)));
        Self::new(n, arcs)
    }

    /// Canonical 10-node benchmark graph: directed 10-cycle plus the two
    /// reverse arcs 2 -> 1 and 7 -> 6 (so nodes 2 and 7 have out-degree 3
    /// and the stationary vector is visibly non-uniform).
    pub fn g1() -> Self {
        let arcs = (0..10)
            .map(|i| (i, (i + 1) % 10))
            .chain([(2, 1), (7, 6)]);
        Self::new(10, arcs).expect("g1 preset is strongly connected")
    }

    /// Canonical 10-node benchmark graph: bidirected 10-cycle plus the two
    /// chords 4 -> 9 and 2 -> 7.
    pub fn g2() -> Self {
        let arcs = (0..10)
            .flat_map(|i| [(i, (i + 1) % 10), ((i + 1) % 10, i)])
            .chain([(4, 9), (2, 7)]);
        Self::new(10, arcs).expect("g2 preset is strongly connected")
    }

    /// Parse a plain-text edge list: one `src dst` pair per line, 0-indexed;
    /// blank lines and lines starting with `#` are skipped. The node count
    /// is the largest id mentioned plus one.
    pub fn from_edge_list_text(text: &str) -> Result<Self> {
        let mut arcs = Vec::new();
        let mut max_id = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<usize> {
                tok.and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| Error::ConfigInvalid {
                        field: "graph",
                        reason: format!("edge list line {}: expected 'src dst'", lineno + 1),
                    })
            };
            let s = parse(it.next())?;
            let d = parse(it.next())?;
            if it.next().is_some() {
                return Err(Error::ConfigInvalid {
                    field: "graph",
                    reason: format!("edge list line {}: trailing tokens", lineno + 1),
                });
            }
            max_id = max_id.max(s).max(d);
            arcs.push((s, d));
        }
        if arcs.is_empty() {
            return Err(Error::ConfigInvalid {
                field: "graph",
                reason: "edge list is empty".into(),
            });
        }
        Self::new(max_id + 1, arcs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Non-self arcs, sorted and deduplicated.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Out-degree of `j`, counting the implicit self-loop.
    pub fn out_degree(&self, j: usize) -> usize {
        1 + self.edges.iter().filter(|&&(s, _)| s == j).count()
    }

    /// Both-directions reachability from node 0 establishes strong
    /// connectivity: every node can reach 0's forward tree and be reached
    /// from it.
    fn strongly_connected(&self) -> bool {
        let fwd = self.reachable_from(0, false);
        let bwd = self.reachable_from(0, true);
        fwd.iter().all(|&b| b) && bwd.iter().all(|&b| b)
    }

    fn reachable_from(&self, root: usize, reverse: bool) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(u) = stack.pop() {
            for &(s, d) in &self.edges {
                let (from, to) = if reverse { (d, s) } else { (s, d) };
                if from == u && !seen[to] {
                    seen[to] = true;
                    stack.push(to);
                }
            }
        }
        seen
    }
}

/// Resolve a graph preset string: `ring:<n>`, `complete:<n>`, `g1`, `g2`,
/// or `custom:<path>` (plain-text edge list).
pub fn build_topology(preset: &str) -> Result<DirectedGraph> {
    let invalid = |reason: String| Error::ConfigInvalid {
        field: "graph",
        reason,
    };
    match preset {
        "g1" => Ok(DirectedGraph::g1()),
        "g2" => Ok(DirectedGraph::g2()),
        _ => {
            if let Some(n) = preset.strip_prefix("ring:") {
                let n = n.parse().map_err(|_| invalid(format!("bad ring size in '{preset}'")))?;
                DirectedGraph::ring(n)
            } else if let Some(n) = preset.strip_prefix("complete:") {
                let n = n
                    .parse()
                    .map_err(|_| invalid(format!("bad complete size in '{preset}'")))?;
                DirectedGraph::complete(n)
            } else if let Some(path) = preset.strip_prefix("custom:") {
                let text = std::fs::read_to_string(path)?;
                DirectedGraph::from_edge_list_text(&text)
            } else {
                Err(invalid(format!(
                    "unknown graph preset '{preset}' (expected ring:<n>, complete:<n>, g1, g2, custom:<path>)"
                )))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// ColumnStochasticMatrix
// ---------------------------------------------------------------------------

/// Dense mixing matrix with a_ij > 0 iff j -> i is an arc or i = j.
/// Columns sum to one; the diagonal is strictly positive.
#[derive(Debug, Clone)]
pub struct ColumnStochasticMatrix {
    n: usize,
    a: DMatrix<f64>,
    /// Per receiving node i: sorted (j, a_ij) over in-neighbors, self included.
    in_lists: Vec<Vec<(usize, f64)>>,
    nonself_edges: usize,
}

/// Example-1 weights: a_ij = 1/d_j^out (self-loop counted in d_j^out).
pub fn out_degree_weight_matrix(g: &DirectedGraph) -> ColumnStochasticMatrix {
    let n = g.n();
    let dout: Vec<usize> = (0..n).map(|j| g.out_degree(j)).collect();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        a[(j, j)] = 1.0 / dout[j] as f64;
    }
    for &(s, d) in g.edges() {
        a[(d, s)] = 1.0 / dout[s] as f64;
    }
    let in_lists = (0..n)
        .map(|i| (0..n).filter(|&j| a[(i, j)] != 0.0).map(|j| (j, a[(i, j)])).collect())
        .collect();
    ColumnStochasticMatrix {
        n,
        a,
        in_lists,
        nonself_edges: g.edges().len(),
    }
}

impl ColumnStochasticMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.a[(i, j)]
    }

    /// In-neighbors of `i` (self included) with their weights, ascending j.
    pub fn in_neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.in_lists[i]
    }

    /// Number of directed non-self arcs (= messages transmitted per round).
    pub fn nonself_edge_count(&self) -> usize {
        self.nonself_edges
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

// ---------------------------------------------------------------------------
// SpectralProfile
// ---------------------------------------------------------------------------

/// Empirically estimated mixing constants of a column-stochastic matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralProfile {
    /// Stationary vector: A phi = phi, entries >= 0, sum 1.
    pub phi: Vec<f64>,
    /// Fitted geometric mixing rate, in (0, 1).
    pub lambda_est: f64,
    /// Fitted prefactor; ||A^t - phi 1^T|| <= c_est * lambda_est^t holds at
    /// every sampled t.
    pub c_est: f64,
    /// Lower bound on [A^t 1]_i over the scanned horizon.
    pub delta_est: f64,
    /// Operator norm ||A - I|| (largest singular value).
    pub gamma: f64,
    /// Scan/fit horizon used.
    pub horizon: usize,
    /// Number of t samples that survived the underflow cut.
    pub fit_points: usize,
    /// True when the matrix mixed to the floating-point floor within the
    /// horizon (or n = 1), leaving nothing to fit; lambda_est/c_est are then
    /// nominal placeholders rather than fitted values.
    pub degenerate: bool,
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

/// Estimate phi, (lambda, C), delta, and gamma for `a`.
///
/// phi: power iteration until successive iterates differ by <= `tol` in L1
/// (at most 10 * horizon applications). (lambda, C): least-squares line in
/// (t, log ||A^t - phi 1^T||) over t = 1..=horizon, discarding samples below
/// the underflow floor; C is then raised to cover every sample and inflated
/// 5%. delta: min over t and i of [A^t 1]_i, scaled by 0.99 on the fitted
/// path (no margin when the scan is degenerate: the limit was reached inside
/// the horizon, so there is no extrapolation to guard).
pub fn estimate_spectral_profile(
    a: &ColumnStochasticMatrix,
    horizon: usize,
    tol: f64,
) -> Result<SpectralProfile> {
    let n = a.n();
    if horizon < 2 * n {
        return Err(Error::ConfigInvalid {
            field: "horizon",
            reason: format!("horizon {horizon} < 2n = {}", 2 * n),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::ConfigInvalid {
            field: "tol",
            reason: "power-iteration tolerance must be positive".into(),
        });
    }
    let m = a.matrix();

    // --- phi by power iteration (A preserves the 1-sum, so no renorm).
    let mut v = DVector::from_element(n, 1.0 / n as f64);
    let max_iters = 10 * horizon;
    let mut converged = n == 1;
    for _ in 0..max_iters {
        if converged {
            break;
        }
        let w = m * &v;
        let diff: f64 = (&w - &v).abs().sum();
        v = w;
        if diff <= tol {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "power iteration for phi",
            iterations: max_iters,
        });
    }
    let total: f64 = v.sum();
    let phi: Vec<f64> = v.iter().map(|x| (x / total).max(0.0)).collect();

    // --- scan A^t for the norm sequence and the delta floor.
    let phi_outer = DMatrix::from_fn(n, n, |i, _| phi[i]);
    let mut power = m.clone();
    let mut ones_t = DVector::from_element(n, 1.0);
    let mut samples: Vec<(f64, f64)> = Vec::new(); // (t, ln norm)
    let mut delta_raw = f64::INFINITY;
    for t in 1..=horizon {
        let nrm = spectral_norm(&(&power - &phi_outer));
        if nrm > NORM_UNDERFLOW_FLOOR {
            samples.push((t as f64, nrm.ln()));
        }
        ones_t = m * &ones_t;
        delta_raw = delta_raw.min(ones_t.min());
        if t < horizon {
            power = m * &power;
        }
    }

    let gamma = spectral_norm(&(m - DMatrix::<f64>::identity(n, n)));
    let degenerate = samples.len() < 2;

    let (lambda_est, c_est) = if degenerate {
        // Nothing to fit: A^t is already phi 1^T to machine precision for
        // every sampled t (or n = 1). Report a nominal mid-range rate and
        // the underflow floor as the prefactor.
        (0.5, NORM_UNDERFLOW_FLOOR)
    } else {
        let k = samples.len() as f64;
        let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
        for &(t, y) in &samples {
            st += t;
            sy += y;
            stt += t * t;
            sty += t * y;
        }
        let slope = (k * sty - st * sy) / (k * stt - st * st);
        let intercept = (sy - slope * st) / k;
        let lambda = slope.exp();
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::DegenerateSpectrum(format!(
                "fitted mixing rate {lambda:.6} is outside (0, 1)"
            )));
        }
        // Raise C so the bound holds at every sample, then add 5% headroom.
        let sup_log_ratio = samples
            .iter()
            .map(|&(t, y)| y - t * slope)
            .fold(f64::NEG_INFINITY, f64::max);
        let c = C_INFLATION * intercept.max(sup_log_ratio).exp();
        (lambda, c)
    };

    let delta_est = if degenerate { delta_raw } else { DELTA_MARGIN * delta_raw };

    Ok(SpectralProfile {
        phi,
        lambda_est,
        c_est,
        delta_est,
        gamma,
        horizon,
        fit_points: samples.len(),
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// TheoryBounds
// ---------------------------------------------------------------------------

/// Quantization-admissibility thresholds derived from a spectral profile.
///
/// With lambda, C, gamma from the profile, n nodes, and gradient second
/// moment bound D^2:
///
/// ```text
///   lambda~1 = 1 / (2 lambda^{-1/2} + 4C (lambda - lambda^{3/2})^{-1})
///   lambda~2 = (1 + 6C^2 / (1-lambda)^2)^{-1/2}
///   xi       = 6 n D^2 (1+gamma^2) (1 + 6C^2/(1-lambda)^2)
/// ```
///
/// Gossip requires omega <= lambda~1 / (1+gamma); optimization requires
/// omega <= lambda~2 / sqrt(6 (1+gamma^2)). The thresholds are extremely
/// conservative worst-case constants; runs above them typically still
/// converge, so exceeding them is reported as a warning, not an error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryBounds {
    pub lambda_tilde_1: f64,
    pub lambda_tilde_2: f64,
    pub xi: f64,
    pub omega_max_gossip: f64,
    pub omega_max_opt: f64,
    /// Whether admissibility enforcement was requested for the run these
    /// bounds were computed for.
    pub enforce: bool,
}

/// Direct formula substitution from the profile. `d_sq` is the gradient
/// second-moment bound D^2 feeding xi (pass 0 when not applicable, e.g.
/// gossip runs).
pub fn theory_bounds(
    sp: &SpectralProfile,
    n: usize,
    d_sq: f64,
    enforce: bool,
) -> Result<TheoryBounds> {
    let lam = sp.lambda_est;
    if !(lam > 0.0) || lam >= 1.0 - 1e-9 {
        return Err(Error::DegenerateSpectrum(format!(
            "lambda_est = {lam:.12} outside (0, 1 - 1e-9); contraction formulas blow up"
        )));
    }
    let c = sp.c_est;
    let gamma = sp.gamma;
    let lambda_tilde_1 = 1.0 / (2.0 / lam.sqrt() + 4.0 * c / (lam - lam.powf(1.5)));
    let q = 1.0 + 6.0 * c * c / ((1.0 - lam) * (1.0 - lam));
    let lambda_tilde_2 = 1.0 / q.sqrt();
    let xi = 6.0 * n as f64 * d_sq * (1.0 + gamma * gamma) * q;
    Ok(TheoryBounds {
        lambda_tilde_1,
        lambda_tilde_2,
        xi,
        omega_max_gossip: lambda_tilde_1 / (1.0 + gamma),
        omega_max_opt: lambda_tilde_2 / (6.0 * (1.0 + gamma * gamma)).sqrt(),
        enforce,
    })
}

// ---------------------------------------------------------------------------
