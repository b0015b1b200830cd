//! Matrix-form oracle: an independent re-implementation of both algorithms
//! used to validate the per-node engine.
//!
//! The engine in [`crate::consensus`] / [`crate::optimizer`] works node by
//! node with in-neighbor lists and replica copies. The oracle instead keeps
//! the whole network as n x d matrices and applies the textbook updates
//!
//! ```text
//!   Xhat(t+1) = Xhat(t) + Q(X(t) - Xhat(t))
//!   X(t+1)    = X(t) + (A - I) Xhat(t+1)              (consensus)
//!   W(t+1)    = X(t) + (A - I) Xhat(t+1)              (optimization)
//!   X(t+1)    = W(t+1) - alpha G(Z(t+1))
//!   y(t+1)    = A y(t)
//! ```
//!
//! including its own row quantizer that shares only the rng stream keying
//! and draw schedule with the engine (one uniform per entry of a nonzero
//! row, none for zero rows). Matching trajectories over hundreds of rounds
//! therefore checks the graph weights, the replica bookkeeping, the
//! quantizer, and the rng addressing all at once. With the identity
//! quantizer the recursion collapses to X(t) = A^{t-1} X(1), giving a
//! closed form to test against.
//!
//! Weighted sums follow the crate-wide convention of accumulating in
//! ascending node order (see [`crate::quantizer::l2_norm`]); the oracle
//! honors it so replayed Bernoulli thresholds match bit for bit. Any other
//! association eventually flips a level draw once the quantized residual
//! decays to the accumulated rounding-jitter scale, which would bound the
//! achievable agreement at ~1e-12 instead of 0.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{build_topology, out_degree_weight_matrix, ColumnStochasticMatrix};
use crate::objective::{least_squares_set_scaled, ObjectiveSet};
use crate::optimizer::{init_opt, sgd_round, GradEval};
use crate::consensus::{gossip_round, init_gossip};
use crate::quantizer::{QuantizerKind, QuantizerSpec};
use crate::rng::{stream, Purpose};

// ---------------------------------------------------------------------------
// Matrix state and steps
// ---------------------------------------------------------------------------

/// Whole-network state: row i of each matrix is node i's vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixState {
    pub x: DMatrix<f64>,
    pub x_hat: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Rounds completed; the next step executes round `round + 1`.
    pub round: u64,
}

impl MatrixState {
    /// z_i = row i of the tracked matrix divided by y_i; consensus reads x,
    /// optimization reads w.
    pub fn z_rows(&self, from_w: bool) -> DMatrix<f64> {
        let src = if from_w { &self.w } else { &self.x };
        let mut z = src.clone();
        for i in 0..z.nrows() {
            let yi = self.y[i];
            for c in 0..z.ncols() {
                z[(i, c)] /= yi;
            }
        }
        z
    }
}

/// Gossip start: X(1) from the given rows, everything else at the fixed
/// initial values (Xhat = 0, y = 1).
pub fn init_gossip_matrix(x1: &[Vec<f64>]) -> Result<MatrixState> {
    if x1.is_empty() || x1[0].is_empty() {
        return Err(Error::DimensionMismatch {
            what: "initial vectors",
            expected: 1,
            got: 0,
        });
    }
    let (n, d) = (x1.len(), x1[0].len());
    if let Some(bad) = x1.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            what: "initial vector",
            expected: d,
            got: bad.len(),
        });
    }
    let x = DMatrix::from_fn(n, d, |i, c| x1[i][c]);
    Ok(MatrixState {
        x_hat: DMatrix::zeros(n, d),
        w: DMatrix::zeros(n, d),
        y: DVector::from_element(n, 1.0),
        x,
        round: 0,
    })
}

/// Optimization start: X(1) = 0.
pub fn init_opt_matrix(n: usize, d: usize) -> MatrixState {
    MatrixState {
        x: DMatrix::zeros(n, d),
        x_hat: DMatrix::zeros(n, d),
        w: DMatrix::zeros(n, d),
        y: DVector::from_element(n, 1.0),
        round: 0,
    }
}

/// Row-wise quantize-then-decode, re-implemented from the encoding rule:
/// scale |v| by s / ||row||, keep the floor or round up with probability
/// equal to the fractional part, decode as norm * sign * level / s.
fn quantize_decode_rows(
    v: &DMatrix<f64>,
    spec: &QuantizerSpec,
    master_seed: u64,
    round: u64,
) -> DMatrix<f64> {
    let s = match spec.kind {
        QuantizerKind::Identity => return v.clone(),
        QuantizerKind::StochasticLevels { s } => s as f64,
    };
    let mut out = DMatrix::zeros(v.nrows(), v.ncols());
    for i in 0..v.nrows() {
        let mut norm_sq = 0.0;
        for c in 0..v.ncols() {
            norm_sq += v[(i, c)] * v[(i, c)];
        }
        let norm = norm_sq.sqrt();
        if norm == 0.0 {
            continue; // all-zero row encodes as zero, no draws
        }
        let mut rng = stream(master_seed, i, round, Purpose::Quantize);
        for c in 0..v.ncols() {
            let val = v[(i, c)];
            let r = val.abs() / norm * s;
            let base = r.floor();
            let (base, p) = if base >= s { (s, 0.0) } else { (base, r - base) };
            let u: f64 = rng.gen();
            let level = base + if u < p { 1.0 } else { 0.0 };
            let sign = if val < 0.0 { -1.0 } else { 1.0 };
            out[(i, c)] = norm * sign * (level / s);
        }
    }
    out
}

/// X + (A - I) Xhat evaluated entrywise as x - xhat + sum_j a_ij xhat_j,
/// with the inner sum over all j ascending (full matrix, zero weights
/// included).
fn mix_rows(a: &ColumnStochasticMatrix, x: &DMatrix<f64>, x_hat: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    DMatrix::from_fn(n, d, |i, c| {
        let mut acc = 0.0;
        for j in 0..n {
            acc += a.entry(i, j) * x_hat[(j, c)];
        }
        x[(i, c)] - x_hat[(i, c)] + acc
    })
}

/// y(t+1) = A y(t), accumulated ascending like the rest.
fn advance_weights(a: &ColumnStochasticMatrix, y: &DVector<f64>) -> DVector<f64> {
    let n = y.len();
    DVector::from_fn(n, |i, _| {
        let mut acc = 0.0;
        for j in 0..n {
            acc += a.entry(i, j) * y[j];
        }
        acc
    })
}

/// One consensus round in matrix form.
pub fn matrix_gossip_step(
    st: &MatrixState,
    a: &ColumnStochasticMatrix,
    spec: &QuantizerSpec,
    master_seed: u64,
) -> MatrixState {
    let round = st.round + 1;
    let q = quantize_decode_rows(&(&st.x - &st.x_hat), spec, master_seed, round);
    let x_hat = &st.x_hat + q;
    let x = mix_rows(a, &st.x, &x_hat);
    let y = advance_weights(a, &st.y);
    MatrixState {
        x,
        x_hat,
        w: st.w.clone(),
        y,
        round,
    }
}

/// One SGD round in matrix form; gradients come from the same per-(node,
/// round) streams the engine uses.
pub fn matrix_opt_step(
    st: &MatrixState,
    a: &ColumnStochasticMatrix,
    spec: &QuantizerSpec,
    alpha: f64,
    set: &ObjectiveSet,
    master_seed: u64,
) -> MatrixState {
    let round = st.round + 1;
    let q = quantize_decode_rows(&(&st.x - &st.x_hat), spec, master_seed, round);
    let x_hat = &st.x_hat + q;
    let w = mix_rows(a, &st.x, &x_hat);
    let y = advance_weights(a, &st.y);
    let mut x = w.clone();
    for i in 0..x.nrows() {
        let z: Vec<f64> = (0..x.ncols()).map(|c| w[(i, c)] / y[i]).collect();
        let mut rng = stream(master_seed, i, round, Purpose::Gradient);
        let g = set.nodes[i].sample_gradient(&z, &mut rng);
        for c in 0..x.ncols() {
            x[(i, c)] = w[(i, c)] - alpha * g[c];
        }
    }
    MatrixState {
        x,
        x_hat,
        w,
        y,
        round,
    }
}

/// Exact-communication closed form: (A^t X(1), A^t 1). The identity-
/// quantizer engine must satisfy X(t+1) = A^t X(1) and y(t+1) = A^t 1, so
/// z after round t equals rows of A^t X(1) divided by A^t 1.
pub fn closed_form_pushsum(
    a: &ColumnStochasticMatrix,
    x1: &DMatrix<f64>,
    t: u64,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = a.n();
    let mut p = DMatrix::<f64>::identity(n, n);
    for _ in 0..t {
        p = a.matrix() * p;
    }
    (&p * x1, &p * DVector::from_element(n, 1.0))
}

// ---------------------------------------------------------------------------
// Validation suite
// ---------------------------------------------------------------------------

/// One validation check's outcome.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Max absolute engine-vs-oracle deviation across x, y and z over a full
/// gossip run. Initial vectors are U[0,1]^d from the round-0 Init streams.
pub fn gossip_equivalence_dev(
    graph: &str,
    d: usize,
    spec: &QuantizerSpec,
    rounds: u64,
    seed: u64,
) -> Result<f64> {
    let g = build_topology(graph)?;
    let a = out_degree_weight_matrix(&g);
    let n = g.n();
    let x_init: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut rng = stream(seed, i, 0, Purpose::Init);
            (0..d).map(|_| rng.gen::<f64>()).collect()
        })
        .collect();
    let mut engine = init_gossip(&a, &x_init)?;
    let mut oracle = init_gossip_matrix(&x_init)?;
    let mut max_dev: f64 = 0.0;
    for t in 1..=rounds {
        gossip_round(&mut engine, &a, spec, seed, t, t % 25 == 0)?;
        oracle = matrix_gossip_step(&oracle, &a, spec, seed);
        let z = oracle.z_rows(false);
        for (i, st) in engine.iter().enumerate() {
            max_dev = max_dev.max((st.y() - oracle.y[i]).abs());
            for c in 0..d {
                max_dev = max_dev.max((st.x()[c] - oracle.x[(i, c)]).abs());
                max_dev = max_dev.max((st.z()[c] - z[(i, c)]).abs());
            }
        }
    }
    Ok(max_dev)
}

/// Max absolute engine-vs-oracle deviation across x, y and z over a full
/// SGD run on a unit-scale least-squares objective (5 anchors per node).
pub fn sgd_equivalence_dev(
    graph: &str,
    d: usize,
    spec: &QuantizerSpec,
    rounds: u64,
    seed: u64,
    alpha: f64,
) -> Result<f64> {
    let g = build_topology(graph)?;
    let a = out_degree_weight_matrix(&g);
    let n = g.n();
    let set = least_squares_set_scaled(n, 5, d, seed, 0.0)?;
    let mut engine = init_opt(&a, d)?;
    let mut oracle = init_opt_matrix(n, d);
    let mut max_dev: f64 = 0.0;
    for t in 1..=rounds {
        sgd_round(&mut engine, &a, spec, alpha, &set, seed, t, t % 25 == 0, GradEval::AtZ)?;
        oracle = matrix_opt_step(&oracle, &a, spec, alpha, &set, seed);
        let z = oracle.z_rows(true);
        for (i, st) in engine.iter().enumerate() {
            max_dev = max_dev.max((st.y() - oracle.y[i]).abs());
            for c in 0..d {
                max_dev = max_dev.max((st.x()[c] - oracle.x[(i, c)]).abs());
                max_dev = max_dev.max((st.z()[c] - z[(i, c)]).abs());
            }
        }
    }
    Ok(max_dev)
}

/// Max absolute deviation of the identity-quantizer engine's z from the
/// closed form A^t X(1) / A^t 1, checked after every round.
pub fn closed_form_dev(graph: &str, d: usize, rounds: u64, seed: u64) -> Result<f64> {
    let g = build_topology(graph)?;
    let a = out_degree_weight_matrix(&g);
    let n = g.n();
    let spec = QuantizerSpec::identity();
    let x_init: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut rng = stream(seed, i, 0, Purpose::Init);
            (0..d).map(|_| rng.gen::<f64>()).collect()
        })
        .collect();
    let x1 = DMatrix::from_fn(n, d, |i, c| x_init[i][c]);
    let mut engine = init_gossip(&a, &x_init)?;
    let mut max_dev: f64 = 0.0;
    for t in 1..=rounds {
        gossip_round(&mut engine, &a, &spec, seed, t, false)?;
        let (px, py) = closed_form_pushsum(&a, &x1, t);
        for (i, st) in engine.iter().enumerate() {
            for c in 0..d {
                max_dev = max_dev.max((st.z()[c] - px[(i, c)] / py[i]).abs());
            }
        }
    }
    Ok(max_dev)
}

/// The full engine-vs-oracle validation suite behind `validate`: both
/// algorithms on ring(3) and g1 at d in {1, 8, 64}, plus the closed-form
/// reduction and fixed-point checks.
pub fn run_validation_suite(seed: u64) -> Vec<Check> {
    const TOL: f64 = 1e-12;
    let spec16 = QuantizerSpec::levels(16).unwrap();
    let mut checks = Vec::new();
    let mut record = |name: String, result: Result<f64>, tol: f64| {
        let check = match result {
            Ok(dev) => Check {
                passed: dev <= tol,
                detail: format!("max deviation {dev:.3e} (tolerance {tol:.0e})"),
                name,
            },
            Err(e) => Check {
                passed: false,
                detail: format!("error: {e}"),
                name,
            },
        };
        checks.push(check);
    };

    for graph in ["ring:3", "g1"] {
        for d in [1usize, 8, 64] {
            record(
                format!("gossip engine = matrix oracle [{graph}, d={d}, levels:16]"),
                gossip_equivalence_dev(graph, d, &spec16, 100, seed),
                TOL,
            );
            record(
                format!("sgd engine = matrix oracle [{graph}, d={d}, levels:16]"),
                sgd_equivalence_dev(graph, d, &spec16, 100, seed, 0.05),
                TOL,
            );
        }
    }
    record(
        "identity-quantizer gossip = closed form A^t X / A^t 1 [g1, d=8]".into(),
        closed_form_dev("g1", 8, 100, seed),
        1e-10,
    );
    record(
        "identity-quantizer gossip = closed form A^t X / A^t 1 [ring:3, d=3]".into(),
        closed_form_dev("ring:3", 3, 100, seed),
        1e-10,
    );

    // Complete graph: exact average after the first identity round.
    let complete_avg = (|| -> Result<f64> {
        let a = out_degree_weight_matrix(&build_topology("complete:4")?);
        let x_init: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut rng = stream(seed, i, 0, Purpose::Init);
                (0..2).map(|_| rng.gen::<f64>()).collect()
            })
            .collect();
        let target: Vec<f64> = (0..2)
            .map(|c| x_init.iter().map(|v| v[c]).sum::<f64>() / 4.0)
            .collect();
        let mut engine = init_gossip(&a, &x_init)?;
        let spec = QuantizerSpec::identity();
        let mut dev: f64 = 0.0;
        for t in 1..=2 {
            gossip_round(&mut engine, &a, &spec, seed, t, false)?;
            for st in engine.iter() {
                for c in 0..2 {
                    dev = dev.max((st.z()[c] - target[c]).abs());
                }
            }
        }
        Ok(dev)
    })();
    record(
        "complete(4) identity gossip averages exactly in one round".into(),
        complete_avg,
        TOL,
    );

    // All-zero state is a fixed point of the quantized dynamics.
    let zero_fixed = (|| -> Result<f64> {
        let a = out_degree_weight_matrix(&build_topology("g1")?);
        let spec = QuantizerSpec::levels(4).unwrap();
        let mut engine = init_gossip(&a, &vec![vec![0.0; 4]; 10])?;
        for t in 1..=10 {
            gossip_round(&mut engine, &a, &spec, seed, t, true)?;
        }
        let mut dev: f64 = 0.0;
        for st in engine.iter() {
            for c in 0..4 {
                dev = dev.max(st.x()[c].abs()).max(st.z()[c].abs());
            }
        }
        Ok(dev)
    })();
    record("all-zero state is a fixed point [g1, levels:4]".into(), zero_fixed, 0.0);

    checks
}

// ---------------------------------------------------------------------------
