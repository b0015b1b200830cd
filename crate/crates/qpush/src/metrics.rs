//! Run traces, their CSV/JSON serialization, and rate fitting.
//!
//! A run produces one trace: per-round metric rows plus a metadata sidecar
//! (config echo, spectral profile, admissibility verdict, conservation-audit
//! maxima). Serialization is deterministic — field order is fixed, floats
//! print in shortest round-trip scientific form — so identical configs yield
//! byte-identical files.
//!
//! Column schemas:
//!
//! - gossip: `round,max_err,mean_err,residual_u,mass_drift,cum_bits`
//! - optimization: `round,gap_node1_avg,cons_err_max,grad_norm_sq,residual_u,cum_bits`
//!
//! `residual_u` is the replica residual ||X(t) - Xhat(t+1)||_F for gossip
//! and its square for optimization (where the natural invariant is the
//! squared residual per alpha^2). `rate_fit` regresses ln(column) on the
//! round index over a caller-chosen window; late-run values sitting at the
//! floating-point noise floor would flatten the fit, so callers restrict the
//! window to the decaying segment.

use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::graph::{SpectralProfile, TheoryBounds};

// ---------------------------------------------------------------------------
// Rows
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GossipRow {
    pub round: u64,
    /// max_i ||z_i - xbar(1)||.
    pub max_err: f64,
    /// mean_i ||z_i - xbar(1)||.
    pub mean_err: f64,
    /// ||X(t) - Xhat(t+1)||_F.
    pub residual_u: f64,
    /// L1 deviation of the column sums of X(t+1) from those of X(1).
    pub mass_drift: f64,
    pub cum_bits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptRow {
    pub round: u64,
    /// Optimality gap of node 1's running time average of z.
    pub gap_node1_avg: f64,
    /// max_i ||z_i(t+1) - xbar(t)||^2 with xbar the pre-round mean of x.
    pub cons_err_max: f64,
    /// ||grad F(xbar(t))||^2.
    pub grad_norm_sq: f64,
    /// ||X(t) - Xhat(t+1)||_F^2.
    pub residual_u: f64,
    pub cum_bits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceRows {
    Gossip(Vec<GossipRow>),
    Opt(Vec<OptRow>),
}

pub const GOSSIP_COLUMNS: [&str; 6] = [
    "round",
    "max_err",
    "mean_err",
    "residual_u",
    "mass_drift",
    "cum_bits",
];
pub const OPT_COLUMNS: [&str; 6] = [
    "round",
    "gap_node1_avg",
    "cons_err_max",
    "grad_norm_sq",
    "residual_u",
    "cum_bits",
];

// ---------------------------------------------------------------------------
// Metadata sidecar
// ---------------------------------------------------------------------------

/// Worst-case conservation-audit values observed over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConservationAudit {
    /// Gossip: max over rounds of the mass drift column. Optimization: max
    /// L1 drift of column sums of X(t+1) + alpha * sum of applied gradients
    /// from the initial column sums.
    pub max_mass_drift: f64,
    /// Optimization only: the same drift normalized by the accumulated
    /// magnitudes (relative form); 0 for gossip.
    pub max_mass_residual_rel: f64,
    /// Max |sum_i y_i - n| over rounds.
    pub max_y_sum_dev: f64,
    /// Min over rounds and nodes of the push-sum weight y.
    pub min_y: f64,
}

impl ConservationAudit {
    pub fn new() -> Self {
        Self {
            max_mass_drift: 0.0,
            max_mass_residual_rel: 0.0,
            max_y_sum_dev: 0.0,
            min_y: f64::INFINITY,
        }
    }
}

impl Default for ConservationAudit {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    /// Echo of the config that produced the run.
    pub config: ExperimentConfig,
    pub n: usize,
    pub dim: usize,
    pub spectral: SpectralProfile,
    pub bounds: Option<TheoryBounds>,
    pub omega: f64,
    pub omega_sq: f64,
    /// omega^2 < 1: the compressor contracts at this dimension.
    pub admissible: bool,
    /// omega below the gossip / optimization theorem thresholds.
    pub within_gossip_threshold: bool,
    pub within_opt_threshold: bool,
    pub verdict: String,
    /// Step size actually applied (optimization only).
    pub alpha_used: Option<f64>,
    pub lipschitz_used: Option<f64>,
    pub lipschitz_is_estimate: bool,
    /// Normalizer for relative-error targets: initial max consensus error
    /// (gossip) or initial optimality gap (optimization).
    pub initial_metric: f64,
    pub optimal_value: Option<f64>,
    /// Empirical bounded-variance probe of the stochastic gradients.
    pub grad_variance_probe: Option<f64>,
    /// Per-node terminal gaps of the time-averaged iterates.
    pub terminal_gaps: Option<Vec<f64>>,
    /// Per-node gaps of the final z iterates themselves.
    pub terminal_z_gaps: Option<Vec<f64>>,
    pub conservation: ConservationAudit,
    pub total_bits: u64,
    pub rounds: u64,
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTrace {
    pub rows: TraceRows,
    pub meta: RunMeta,
}

impl MetricsTrace {
    pub fn len(&self) -> usize {
        match &self.rows {
            TraceRows::Gossip(r) => r.len(),
            TraceRows::Opt(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn columns(&self) -> &'static [&'static str] {
        match &self.rows {
            TraceRows::Gossip(_) => &GOSSIP_COLUMNS,
            TraceRows::Opt(_) => &OPT_COLUMNS,
        }
    }

    /// One column as f64 (integer columns are converted).
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let unknown = || Error::ConfigInvalid {
            field: "column",
            reason: format!("no column '{name}' in this trace"),
        };
        match &self.rows {
            TraceRows::Gossip(rows) => {
                let get: fn(&GossipRow) -> f64 = match name {
                    "round" => |r| r.round as f64,
                    "max_err" => |r| r.max_err,
                    "mean_err" => |r| r.mean_err,
                    "residual_u" => |r| r.residual_u,
                    "mass_drift" => |r| r.mass_drift,
                    "cum_bits" => |r| r.cum_bits as f64,
                    _ => return Err(unknown()),
                };
                Ok(rows.iter().map(get).collect())
            }
            TraceRows::Opt(rows) => {
                let get: fn(&OptRow) -> f64 = match name {
                    "round" => |r| r.round as f64,
                    "gap_node1_avg" => |r| r.gap_node1_avg,
                    "cons_err_max" => |r| r.cons_err_max,
                    "grad_norm_sq" => |r| r.grad_norm_sq,
                    "residual_u" => |r| r.residual_u,
                    "cum_bits" => |r| r.cum_bits as f64,
                    _ => return Err(unknown()),
                };
                Ok(rows.iter().map(get).collect())
            }
        }
    }

    pub fn rounds(&self) -> Vec<u64> {
        match &self.rows {
            TraceRows::Gossip(rows) => rows.iter().map(|r| r.round).collect(),
            TraceRows::Opt(rows) => rows.iter().map(|r| r.round).collect(),
        }
    }

    /// CSV text: header plus one row per round, floats in shortest
    /// round-trip scientific notation.
    pub fn csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns().join(","));
        out.push('\n');
        match &self.rows {
            TraceRows::Gossip(rows) => {
                for r in rows {
                    out.push_str(&format!(
                        "{},{:e},{:e},{:e},{:e},{}\n",
                        r.round, r.max_err, r.mean_err, r.residual_u, r.mass_drift, r.cum_bits
                    ));
                }
            }
            TraceRows::Opt(rows) => {
                for r in rows {
                    out.push_str(&format!(
                        "{},{:e},{:e},{:e},{:e},{}\n",
                        r.round,
                        r.gap_node1_avg,
                        r.cons_err_max,
                        r.grad_norm_sq,
                        r.residual_u,
                        r.cum_bits
                    ));
                }
            }
        }
        out
    }

    pub fn meta_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.meta)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.csv_string())?;
        Ok(())
    }

    pub fn write_meta(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.meta_json_string()?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Rate fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    /// Slope of ln(column) per round; exp(slope) is the per-round decay
    /// factor.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
    /// The column was constant over the window; slope 0 by convention.
    pub degenerate: bool,
}

/// Least-squares fit of ln(column) against the round index over the
/// inclusive round window `[window.0, window.1]`.
///
/// Errors with [`Error::NonPositiveValues`] if the window contains values
/// <= 0 (their logarithm is undefined; pick a window above the noise floor)
/// and with `ConfigInvalid` if fewer than two rows fall inside the window.
pub fn rate_fit(trace: &MetricsTrace, column: &str, window: (u64, u64)) -> Result<RateFit> {
    let values = trace.column(column)?;
    let rounds = trace.rounds();
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for (t, v) in rounds.iter().zip(&values) {
        if *t < window.0 || *t > window.1 {
            continue;
        }
        if *v <= 0.0 {
            return Err(Error::NonPositiveValues {
                column: column.to_string(),
            });
        }
        pts.push((*t as f64, v.ln()));
    }
    if pts.len() < 2 {
        return Err(Error::ConfigInvalid {
            field: "window",
            reason: format!(
                "window [{}, {}] covers {} rows; need at least 2",
                window.0,
                window.1,
                pts.len()
            ),
        });
    }
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_t) * (p.0 - mean_t)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - mean_y) * (p.1 - mean_y)).sum();
    if syy <= 1e-24 {
        return Ok(RateFit {
            slope: 0.0,
            intercept: mean_y,
            r_squared: 1.0,
            points: pts.len(),
            degenerate: true,
        });
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_t;
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let e = p.1 - (intercept + slope * p.0);
            e * e
        })
        .sum();
    Ok(RateFit {
        slope,
        intercept,
        r_squared: 1.0 - ss_res / syy,
        points: pts.len(),
        degenerate: false,
    })
}

/// Largest round window `[start, end]` over which `column` stays above
/// `rel_floor` times its maximum — the decaying segment a log fit should
/// use. Returns `None` when no row qualifies.
pub fn decay_window(trace: &MetricsTrace, column: &str, rel_floor: f64) -> Result<Option<(u64, u64)>> {
    let values = trace.column(column)?;
    let rounds = trace.rounds();
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Ok(None);
    }
    let floor = max * rel_floor;
    let mut start = None;
    let mut end = None;
    for (t, v) in rounds.iter().zip(&values) {
        if *v > floor {
            if start.is_none() {
                start = Some(*t);
            }
            end = Some(*t);
        } else if start.is_some() {
            break; // first dip below the floor ends the segment
        }
    }
    Ok(start.zip(end))
}

// ---------------------------------------------------------------------------
