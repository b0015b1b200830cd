//! Experiment configuration: a flat JSON document plus CLI overrides.
//!
//! Every run is fully described by one `ExperimentConfig`; re-running the
//! same config reproduces the same trace byte for byte. Optional fields fall
//! back to documented defaults so a minimal config is just a mode, and CLI
//! flags override individual fields after the file is loaded.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{QuantizerSpec, DEFAULT_NORM_BITS, DEFAULT_SCALAR_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Average consensus on random initial vectors.
    Gossip,
    /// Decentralized SGD on a convex objective (least squares).
    Convex,
    /// Decentralized SGD on a nonconvex objective (or convex under the
    /// nonconvex step-size rule).
    Nonconvex,
    /// Engine-versus-oracle validation suite; produces no trace.
    Validate,
}

fn default_graph() -> String {
    "g1".into()
}
fn default_quant() -> String {
    "identity".into()
}
fn default_init() -> String {
    "uniform01".into()
}
fn default_rounds() -> u64 {
    500
}
fn default_seed() -> u64 {
    1
}
fn default_true() -> bool {
    true
}
fn default_audit_interval() -> u64 {
    50
}
fn default_norm_bits() -> u32 {
    DEFAULT_NORM_BITS
}
fn default_scalar_bits() -> u32 {
    DEFAULT_SCALAR_BITS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Graph preset: `ring:<n>`, `complete:<n>`, `g1`, `g2`, `custom:<path>`.
    #[serde(default = "default_graph")]
    pub graph: String,
    /// Quantizer: `identity` or `levels:<s>`.
    #[serde(default = "default_quant")]
    pub quant: String,
    /// Vector dimension. Required for gossip; for optimization it is derived
    /// from the objective (set it only to cross-check).
    #[serde(default)]
    pub dim: usize,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Step size; when absent the theorem default for the mode is used.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// When set, use the decaying schedule alpha_t = alpha / sqrt(t) instead
    /// of a constant step.
    #[serde(default)]
    pub alpha_decay: bool,
    /// Initialization for gossip vectors; only `uniform01` is defined.
    #[serde(default = "default_init")]
    pub init: String,
    /// Objective preset for optimization modes: `lsq:<n>x<m>:<d>` or
    /// `mlp:<hidden>:<input_dim>`.
    #[serde(default)]
    pub objective: Option<String>,
    /// Output directory for `<name>.csv` and `<name>.meta.json`; no files
    /// are written when absent.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Output base name; derived from the config when absent.
    #[serde(default)]
    pub name: Option<String>,
    /// Refuse to run a quantizer with omega^2 >= 1 at the run's dimension.
    /// Disable deliberately to observe the divergent regime.
    #[serde(default = "default_true")]
    pub enforce_admissibility: bool,
    /// Replica-consistency audit period in rounds.
    #[serde(default = "default_audit_interval")]
    pub audit_interval: u64,
    #[serde(default = "default_norm_bits")]
    pub norm_bits: u32,
    #[serde(default = "default_scalar_bits")]
    pub scalar_bits: u32,
}

impl ExperimentConfig {
    /// A minimal config for the given mode with all defaults.
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            graph: default_graph(),
            quant: default_quant(),
            dim: 0,
            rounds: default_rounds(),
            seed: default_seed(),
            alpha: None,
            alpha_decay: false,
            init: default_init(),
            objective: None,
            out: None,
            name: None,
            enforce_admissibility: true,
            audit_interval: default_audit_interval(),
            norm_bits: default_norm_bits(),
            scalar_bits: default_scalar_bits(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural validation; graph/objective contents are validated when
    /// they are built.
    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &'static str, reason: String| Error::ConfigInvalid { field, reason };
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1".into()));
        }
        if self.audit_interval == 0 {
            return Err(invalid("audit_interval", "must be at least 1".into()));
        }
        if self.init != "uniform01" {
            return Err(invalid(
                "init",
                format!("unknown initializer '{}' (only uniform01)", self.init),
            ));
        }
        if let Some(a) = self.alpha {
            if !a.is_finite() || a <= 0.0 {
                return Err(invalid("alpha", format!("must be finite and positive, got {a}")));
            }
        }
        self.quantizer_spec()?;
        match self.mode {
            Mode::Gossip => {
                if self.dim == 0 {
                    return Err(invalid("dim", "gossip requires dim >= 1".into()));
                }
                if self.objective.is_some() {
                    return Err(invalid(
                        "objective",
                        "gossip mode takes no objective".into(),
                    ));
                }
            }
            Mode::Convex | Mode::Nonconvex => {
                let obj = self.objective.as_deref().ok_or_else(|| {
                    invalid("objective", "optimization modes require an objective".into())
                })?;
                if self.mode == Mode::Convex && !obj.starts_with("lsq:") {
                    return Err(invalid(
                        "objective",
                        format!("convex mode requires a least-squares preset, got '{obj}'"),
                    ));
                }
            }
            Mode::Validate => {}
        }
        Ok(())
    }

    pub fn quantizer_spec(&self) -> Result<QuantizerSpec> {
        let mut spec = QuantizerSpec::parse(&self.quant)?;
        spec.norm_bits = self.norm_bits;
        spec.scalar_bits = self.scalar_bits;
        Ok(spec)
    }

    /// Output base name: the explicit name, or a filesystem-safe summary like
    /// `gossip_g1_levels8_d64_t500_s1`.
    pub fn run_name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let mode = match self.mode {
            Mode::Gossip => "gossip",
            Mode::Convex => "convex",
            Mode::Nonconvex => "nonconvex",
            Mode::Validate => "validate",
        };
        let sanitize = |s: &str| s.replace([':', '/', 'x'], "-");
        let mut name = format!("{}_{}_{}", mode, sanitize(&self.graph), sanitize(&self.quant));
        if let Some(obj) = &self.objective {
            name.push('_');
            name.push_str(&sanitize(obj));
        }
        if self.dim > 0 {
            name.push_str(&format!("_d{}", self.dim));
        }
        name.push_str(&format!("_t{}_s{}", self.rounds, self.seed));
        name
    }

    /// True when `other` differs from `self` only in the quantizer fields
    /// and output naming — the precondition for bit-for-error comparisons.
    pub fn comparable_to(&self, other: &Self) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        for c in [&mut a, &mut b] {
            c.quant = default_quant();
            c.out = None;
            c.name = None;
        }
        a == b
    }
}

// ---------------------------------------------------------------------------
