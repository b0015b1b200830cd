//! Experiment driver: dispatches a config to the right engine, writes the
//! CSV trace plus its JSON metadata sidecar, and runs paired
//! bits-to-target-error comparisons between a quantized and an exact
//! configuration.
//!
//! The comparison is the headline measurement: for each target relative
//! error, report the cumulative transmitted bits at the first round whose
//! error metric (consensus error for gossip, node-1 time-average
//! optimality gap for SGD) drops to the target, for both runs, plus the
//! exact/quantized bit ratio. Targets a run never reaches are reported as
//! unreached rather than errors.

use std::fs;

use crate::config::{ExperimentConfig, Mode};
use crate::consensus::run_gossip;
use crate::error::{Error, Result};
use crate::metrics::MetricsTrace;
use crate::optimizer::run_optimization;
use crate::oracle::{run_validation_suite, Check};

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// What a run produced: a per-round trace for the simulation modes, or a
/// list of checks for `validate`.
#[derive(Debug)]
pub enum RunOutcome {
    Trace(Box<MetricsTrace>),
    Validation(Vec<Check>),
}

/// Run the configured experiment. For trace-producing modes, if `cfg.out`
/// is set, write `<out>/<run-name>.csv` and `<out>/<run-name>.meta.json`
/// (directories created as needed) before returning.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let trace = match cfg.mode {
        Mode::Validate => return Ok(RunOutcome::Validation(run_validation_suite(cfg.seed))),
        Mode::Gossip => run_gossip(cfg)?,
        Mode::Convex | Mode::Nonconvex => run_optimization(cfg)?,
    };
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        let name = cfg.run_name();
        trace.write_csv(&dir.join(format!("{name}.csv")))?;
        trace.write_meta(&dir.join(format!("{name}.meta.json")))?;
    }
    Ok(RunOutcome::Trace(Box::new(trace)))
}

// ---------------------------------------------------------------------------
// Bits-to-error comparison
// ---------------------------------------------------------------------------

/// One target error's worth of comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub target: f64,
    /// Cumulative bits at the first round with relative error <= target.
    pub quantized_bits: Option<u64>,
    pub exact_bits: Option<u64>,
    /// exact / quantized; defined only when both runs reach the target.
    pub ratio: Option<f64>,
}

/// Bits-to-error table for a (quantized, exact) config pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub metric: &'static str,
    pub quantized_label: String,
    pub exact_label: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Plain-text rendering, one line per target.
    pub fn render_text(&self) -> String {
        let fmt = |b: Option<u64>| match b {
            Some(bits) => bits.to_string(),
            None => "unreached".into(),
        };
        let mut out = format!(
            "bits to reach relative {} targets ({} vs {})\n{:>10}  {:>14}  {:>14}  {:>8}\n",
            self.metric, self.quantized_label, self.exact_label, "target", "quantized", "exact", "ratio"
        );
        for r in &self.rows {
            let ratio = match r.ratio {
                Some(v) => format!("{v:.2}"),
                None => "-".into(),
            };
            out.push_str(&format!(
                "{:>10.1e}  {:>14}  {:>14}  {:>8}\n",
                r.target,
                fmt(r.quantized_bits),
                fmt(r.exact_bits),
                ratio
            ));
        }
        out
    }
}

/// Error metric column for a mode's trace.
fn metric_column(mode: Mode) -> &'static str {
    match mode {
        Mode::Gossip => "max_err",
        _ => "gap_node1_avg",
    }
}

/// Cumulative bits at the first round where metric / initial <= target.
fn bits_at_target(trace: &MetricsTrace, column: &str, target: f64) -> Result<Option<u64>> {
    let metric = trace.column(column)?;
    let bits = trace.column("cum_bits")?;
    let initial = trace.meta.initial_metric;
    if !(initial > 0.0) {
        return Err(Error::ConfigInvalid {
            field: "init",
            reason: format!("initial error metric {initial} is not positive"),
        });
    }
    for (v, b) in metric.iter().zip(&bits) {
        if v / initial <= target {
            return Ok(Some(*b as u64));
        }
    }
    Ok(None)
}

/// Run both configs in memory and tabulate cumulative bits to each target
/// relative error. The configs must agree on everything except the
/// quantizer (and output naming).
pub fn bits_to_error(
    quantized: &ExperimentConfig,
    exact: &ExperimentConfig,
    targets: &[f64],
) -> Result<ComparisonTable> {
    if !quantized.comparable_to(exact) {
        return Err(Error::ConfigInvalid {
            field: "quant",
            reason: "comparison configs must be identical except for the quantizer".into(),
        });
    }
    if quantized.mode == Mode::Validate {
        return Err(Error::ConfigInvalid {
            field: "mode",
            reason: "validate mode produces no error trace to compare".into(),
        });
    }
    if targets.is_empty() {
        return Err(Error::ConfigInvalid {
            field: "targets",
            reason: "at least one target error is required".into(),
        });
    }
    let mut in_memory_q = quantized.clone();
    in_memory_q.out = None;
    let mut in_memory_e = exact.clone();
    in_memory_e.out = None;
    let (tq, te) = match (run(&in_memory_q)?, run(&in_memory_e)?) {
        (RunOutcome::Trace(a), RunOutcome::Trace(b)) => (a, b),
        _ => unreachable!("validate mode was rejected above"),
    };
    let column = metric_column(quantized.mode);
    let mut rows = Vec::with_capacity(targets.len());
    for &target in targets {
        if !(target > 0.0) {
            return Err(Error::ConfigInvalid {
                field: "targets",
                reason: format!("target {target} is not positive"),
            });
        }
        let quantized_bits = bits_at_target(&tq, column, target)?;
        let exact_bits = bits_at_target(&te, column, target)?;
        let ratio = match (quantized_bits, exact_bits) {
            (Some(q), Some(e)) if q > 0 => Some(e as f64 / q as f64),
            _ => None,
        };
        rows.push(ComparisonRow {
            target,
            quantized_bits,
            exact_bits,
            ratio,
        });
    }
    Ok(ComparisonTable {
        metric: column,
        quantized_label: quantized.quant.clone(),
        exact_label: exact.quant.clone(),
        rows,
    })
}

// ---------------------------------------------------------------------------
