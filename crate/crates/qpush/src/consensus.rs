//! Quantized push-sum consensus over a directed graph.
//!
//! Node i holds a value vector x_i, a push-sum weight y_i, the ratio
//! z_i = x_i / y_i, and one replica of the quantized state x_hat_j for every
//! in-neighbor j (and itself). Each round t:
//!
//! ```text
//!   1. broadcast   Q_j = quantize(x_j(t) - x_hat_j(t))
//!   2. replicas    x_hat_j(t+1) = x_hat_j(t) + dec(Q_j)   at every holder
//!   3. values      x_i(t+1) = x_i(t) - x_hat_i(t+1) + sum_j a_ij x_hat_j(t+1)
//!   4. weights     y_i(t+1) = sum_j a_ij y_j(t)
//!   5. ratio       z_i(t+1) = x_i(t+1) / y_i(t+1)
//! ```
//!
//! Because decoding is deterministic, every holder's replica of x_hat_j
//! stays bitwise identical to the sender's own copy; a periodic audit
//! enforces this. Column stochasticity makes step 3 conserve the total mass
//! sum_i x_i exactly (up to floating-point roundoff) no matter how coarse
//! the quantizer is, and z_i converges geometrically to the average of the
//! initial vectors whenever the quantizer contracts (omega^2 < 1 and within
//! the spectral threshold). With omega^2 >= 1 — e.g. 8 levels at dimension
//! 1024 — the replica residual is amplified round over round and the run
//! diverges; such configs only run with enforcement disabled.

use rand::Rng;

use crate::config::{ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::graph::{
    build_topology, estimate_spectral_profile, out_degree_weight_matrix, theory_bounds,
    ColumnStochasticMatrix,
};
use crate::metrics::{
    ConservationAudit, GossipRow, MetricsTrace, RunMeta, TraceRows,
};
use crate::quantizer::{dequantize, quantize, QuantizerSpec};
use crate::rng::{stream, Purpose};

/// Tolerance for the replica-consistency audit: replicas evolve by identical
/// deterministic updates, so any drift at all is a logic error; 1e-12 allows
/// only for exotic platform non-determinism.
pub const REPLICA_AUDIT_TOL: f64 = 1e-12;

/// Spectral-estimation parameters shared by all runs.
pub const SPECTRAL_TOL: f64 = 1e-13;

pub fn spectral_horizon(n: usize) -> usize {
    (2 * n).max(300)
}

// ---------------------------------------------------------------------------
// Node state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GossipNodeState {
    x: Vec<f64>,
    y: f64,
    z: Vec<f64>,
    /// In-neighbor ids (self included), ascending; `replicas` is parallel.
    replica_ids: Vec<usize>,
    replicas: Vec<Vec<f64>>,
    self_idx: usize,
}

impl GossipNodeState {
    pub fn x(&self) -> &[f64] {
        &self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> &[f64] {
        &self.z
    }
    /// This node's own replica of its quantized state x_hat_i.
    pub fn x_hat_self(&self) -> &[f64] {
        &self.replicas[self.self_idx]
    }
    /// This node's replica of in-neighbor j's x_hat, if j is tracked.
    pub fn x_hat_of(&self, j: usize) -> Option<&[f64]> {
        self.replica_ids
            .iter()
            .position(|&id| id == j)
            .map(|idx| self.replicas[idx].as_slice())
    }
}

/// Fresh states: x from `x_init`, y = 1, z = x, all replicas zero.
pub fn init_gossip(
    a: &ColumnStochasticMatrix,
    x_init: &[Vec<f64>],
) -> Result<Vec<GossipNodeState>> {
    let n = a.n();
    if x_init.len() != n {
        return Err(Error::DimensionMismatch {
            what: "initial vectors",
            expected: n,
            got: x_init.len(),
        });
    }
    let d = x_init[0].len();
    if d == 0 {
        return Err(Error::DimensionMismatch {
            what: "vector dimension",
            expected: 1,
            got: 0,
        });
    }
    if let Some(bad) = x_init.iter().find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch {
            what: "initial vector",
            expected: d,
            got: bad.len(),
        });
    }
    Ok((0..n)
        .map(|i| {
            let ids: Vec<usize> = a.in_neighbors(i).iter().map(|&(j, _)| j).collect();
            let self_idx = ids.iter().position(|&j| j == i).expect("diagonal weight");
            GossipNodeState {
                x: x_init[i].clone(),
                y: 1.0,
                z: x_init[i].clone(),
                replicas: vec![vec![0.0; d]; ids.len()],
                replica_ids: ids,
                self_idx,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// One round
// ---------------------------------------------------------------------------

/// What one round reports back to the run loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundOutcome {
    /// Bits transmitted this round: one message per non-self arc.
    pub bits: u64,
    /// sum_j ||x_j(t) - x_hat_j(t+1)||^2, the squared replica residual.
    pub residual_sq: f64,
}

/// The state any broadcast participant exposes to the shared quantize /
/// replica-update phase. Implemented by both the gossip and the optimizer
/// node states so the two engines run the exact same wire protocol.
pub(crate) trait BroadcastNode {
    /// The vector being tracked by the replicas (x in both algorithms).
    fn bx(&self) -> &[f64];
    fn by(&self) -> f64;
    fn own_replica(&self) -> &[f64];
    fn replica_ids(&self) -> &[usize];
    fn replica_at(&self, idx: usize) -> &[f64];
    /// Fold each sender's decoded difference into this node's replicas.
    fn fold_decoded(&mut self, decoded: &[Vec<f64>]);
}

impl BroadcastNode for GossipNodeState {
    fn bx(&self) -> &[f64] {
        &self.x
    }
    fn by(&self) -> f64 {
        self.y
    }
    fn own_replica(&self) -> &[f64] {
        &self.replicas[self.self_idx]
    }
    fn replica_ids(&self) -> &[usize] {
        &self.replica_ids
    }
    fn replica_at(&self, idx: usize) -> &[f64] {
        &self.replicas[idx]
    }
    fn fold_decoded(&mut self, decoded: &[Vec<f64>]) {
        for (idx, &j) in self.replica_ids.iter().enumerate() {
            for (h, q) in self.replicas[idx].iter_mut().zip(&decoded[j]) {
                *h += q;
            }
        }
    }
}

/// Shared broadcast phase (steps 1-2): encode every node's difference,
/// decode once, fold into every holder's replica. Returns the transmitted
/// bits and the squared replica residual.
pub(crate) fn broadcast_phase<N: BroadcastNode>(
    states: &mut [N],
    a: &ColumnStochasticMatrix,
    spec: &QuantizerSpec,
    master_seed: u64,
    round: u64,
) -> Result<RoundOutcome> {
    let d = states[0].bx().len();
    let mut decoded = Vec::with_capacity(states.len());
    for (j, st) in states.iter().enumerate() {
        let delta: Vec<f64> = st
            .bx()
            .iter()
            .zip(st.own_replica())
            .map(|(v, h)| v - h)
            .collect();
        let mut rng = stream(master_seed, j, round, Purpose::Quantize);
        let mut msg = quantize(&delta, spec, &mut rng);
        msg.y = st.by();
        decoded.push(dequantize(&msg, spec)?);
    }
    for st in states.iter_mut() {
        st.fold_decoded(&decoded);
    }
    let residual_sq = states
        .iter()
        .map(|st| {
            st.bx()
                .iter()
                .zip(st.own_replica())
                .map(|(v, h)| (v - h) * (v - h))
                .sum::<f64>()
        })
        .sum();
    Ok(RoundOutcome {
        bits: a.nonself_edge_count() as u64 * spec.message_bits(d),
        residual_sq,
    })
}

/// Verify that every holder's replica of x_hat_j matches the sender's own
/// copy. Passes vacuously right after init (all zero); run it after the
/// replica update of step 2.
pub(crate) fn audit_replicas<N: BroadcastNode>(states: &[N], round: u64) -> Result<()> {
    for (i, st) in states.iter().enumerate() {
        for (idx, &j) in st.replica_ids().iter().enumerate() {
            if j == i {
                continue;
            }
            let own = states[j].own_replica();
            let max_abs = st
                .replica_at(idx)
                .iter()
                .zip(own)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if max_abs > REPLICA_AUDIT_TOL {
                return Err(Error::ReplicaDivergence {
                    node: j,
                    round,
                    max_abs,
                });
            }
        }
    }
    Ok(())
}

/// Execute round `round` of quantized push-sum on all nodes.
///
/// Requires `round >= 1` (round 0 addresses initialization randomness).
/// When `audit` is set the replica-consistency check runs after the replica
/// update and fails the round with [`Error::ReplicaDivergence`] on any
/// mismatch beyond [`REPLICA_AUDIT_TOL`].
pub fn gossip_round(
    states: &mut [GossipNodeState],
    a: &ColumnStochasticMatrix,
    spec: &QuantizerSpec,
    master_seed: u64,
    round: u64,
    audit: bool,
) -> Result<RoundOutcome> {
    debug_assert!(round >= 1, "rounds are 1-based");
    let outcome = broadcast_phase(states, a, spec, master_seed, round)?;
    if audit {
        audit_replicas(states, round)?;
    }

    // Steps 3-5. y needs last round's values of the in-neighbors, so
    // snapshot before updating; x_i(t+1) reads only node i's own x, so it
    // updates in place.
    let ys: Vec<f64> = states.iter().map(|st| st.y).collect();
    let n = states.len();
    for i in 0..n {
        // sum_j a_ij x_hat_j(t+1), accumulated in ascending j like every
        // other weighted sum in the crate.
        let d = states[i].x.len();
        let mut mix = vec![0.0; d];
        let mut y_new = 0.0;
        for (idx, &j) in states[i].replica_ids.iter().enumerate() {
            let w = a.in_neighbors(i)[idx].1;
            debug_assert_eq!(a.in_neighbors(i)[idx].0, j);
            for (acc, h) in mix.iter_mut().zip(&states[i].replicas[idx]) {
                *acc += w * h;
            }
            y_new += w * ys[j];
        }
        let st = &mut states[i];
        let own_idx = st.self_idx;
        for c in 0..d {
            st.x[c] = st.x[c] - st.replicas[own_idx][c] + mix[c];
        }
        st.y = y_new;
        for c in 0..d {
            st.z[c] = st.x[c] / st.y;
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

/// Everything the run loop needs about a config's graph and quantizer,
/// shared between the gossip and optimization drivers.
pub(crate) struct RunSetup {
    pub a: ColumnStochasticMatrix,
    pub spec: QuantizerSpec,
    pub spectral: crate::graph::SpectralProfile,
    pub bounds: Option<crate::graph::TheoryBounds>,
    pub omega_sq: f64,
    pub within_gossip_threshold: bool,
    pub within_opt_threshold: bool,
    pub verdict: String,
}

pub(crate) fn prepare_run(cfg: &ExperimentConfig, dim: usize) -> Result<RunSetup> {
    let g = build_topology(&cfg.graph)?;
    let a = out_degree_weight_matrix(&g);
    let spec = cfg.quantizer_spec()?;
    let spectral = estimate_spectral_profile(&a, spectral_horizon(g.n()), SPECTRAL_TOL)?;
    let bounds = theory_bounds(&spectral, g.n(), 0.0, cfg.enforce_admissibility).ok();
    let omega_sq = spec.omega_sq(dim);
    if cfg.enforce_admissibility && omega_sq >= 1.0 {
        return Err(Error::ConfigInvalid {
            field: "quant",
            reason: format!(
                "omega^2 = {omega_sq:.3} >= 1 at dim {dim}: the compressor does not \
                 contract and the run would diverge (disable enforce_admissibility \
                 to observe it)"
            ),
        });
    }
    let omega = omega_sq.sqrt();
    let within_gossip_threshold = bounds
        .as_ref()
        .map(|b| omega <= b.omega_max_gossip)
        .unwrap_or(false);
    let within_opt_threshold = bounds
        .as_ref()
        .map(|b| omega <= b.omega_max_opt)
        .unwrap_or(false);
    let mut verdict = if omega_sq < 1.0 {
        format!("admissible: omega^2 = {omega_sq:.4} < 1")
    } else {
        format!("INADMISSIBLE: omega^2 = {omega_sq:.4} >= 1; expect divergence")
    };
    if !within_gossip_threshold {
        verdict.push_str("; above the conservative gossip threshold (warning only)");
    }
    Ok(RunSetup {
        a,
        spec,
        spectral,
        bounds,
        omega_sq,
        within_gossip_threshold,
        within_opt_threshold,
        verdict,
    })
}

/// Run quantized push-sum consensus per `cfg` and collect the trace.
///
/// Initial vectors are U[0,1]^d per node (round-0 Init streams). Row t
/// records the post-round state: consensus errors of z(t+1) against the
/// initial average, the replica residual ||X(t) - Xhat(t+1)||_F, the mass
/// drift |1^T X(t+1) - 1^T X(1)|_1, and cumulative bits.
pub fn run_gossip(cfg: &ExperimentConfig) -> Result<MetricsTrace> {
    cfg.validate()?;
    if cfg.mode != Mode::Gossip {
        return Err(Error::ConfigInvalid {
            field: "mode",
            reason: "run_gossip requires mode = gossip".into(),
        });
    }
    let d = cfg.dim;
    let setup = prepare_run(cfg, d)?;
    let a = &setup.a;
    let n = a.n();

    let x_init: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut rng = stream(cfg.seed, i, 0, Purpose::Init);
            (0..d).map(|_| rng.gen::<f64>()).collect()
        })
        .collect();
    let mut states = init_gossip(a, &x_init)?;

    // Consensus target: the average of the initial vectors.
    let mut target = vec![0.0; d];
    for xv in &x_init {
        for (acc, v) in target.iter_mut().zip(xv) {
            *acc += v;
        }
    }
    for v in &mut target {
        *v /= n as f64;
    }
    let mass0: Vec<f64> = (0..d)
        .map(|c| x_init.iter().map(|xv| xv[c]).sum())
        .collect();
    let err_of = |st: &GossipNodeState| -> f64 {
        st.z
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let initial_metric = states.iter().map(err_of).fold(0.0f64, f64::max);

    let mut rows = Vec::with_capacity(cfg.rounds as usize);
    let mut conservation = ConservationAudit::new();
    let mut cum_bits = 0u64;
    for t in 1..=cfg.rounds {
        let audit = t % cfg.audit_interval == 0;
        let outcome = gossip_round(&mut states, a, &setup.spec, cfg.seed, t, audit)?;
        cum_bits += outcome.bits;

        let max_err = states.iter().map(err_of).fold(0.0f64, f64::max);
        let mean_err = states.iter().map(err_of).sum::<f64>() / n as f64;
        let mass_drift: f64 = (0..d)
            .map(|c| {
                let s: f64 = states.iter().map(|st| st.x[c]).sum();
                (s - mass0[c]).abs()
            })
            .sum();
        let y_sum: f64 = states.iter().map(|st| st.y).sum();
        let min_y = states.iter().map(|st| st.y).fold(f64::INFINITY, f64::min);
        conservation.max_mass_drift = conservation.max_mass_drift.max(mass_drift);
        conservation.max_y_sum_dev = conservation.max_y_sum_dev.max((y_sum - n as f64).abs());
        conservation.min_y = conservation.min_y.min(min_y);

        rows.push(GossipRow {
            round: t,
            max_err,
            mean_err,
            residual_u: outcome.residual_sq.sqrt(),
            mass_drift,
            cum_bits,
        });
    }

    Ok(MetricsTrace {
        rows: TraceRows::Gossip(rows),
        meta: RunMeta {
            config: cfg.clone(),
            n,
            dim: d,
            spectral: setup.spectral,
            bounds: setup.bounds,
            omega: setup.omega_sq.sqrt(),
            omega_sq: setup.omega_sq,
            admissible: setup.omega_sq < 1.0,
            within_gossip_threshold: setup.within_gossip_threshold,
            within_opt_threshold: setup.within_opt_threshold,
            verdict: setup.verdict,
            alpha_used: None,
            lipschitz_used: None,
            lipschitz_is_estimate: false,
            initial_metric,
            optimal_value: None,
            grad_variance_probe: None,
            terminal_gaps: None,
            terminal_z_gaps: None,
            conservation,
            total_bits: cum_bits,
            rounds: cfg.rounds,
        },
    })
}

// ---------------------------------------------------------------------------
