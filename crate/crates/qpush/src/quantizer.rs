//! Unbiased stochastic vector quantization and transmitted-bit accounting.
//!
//! A vector is encoded as its (unquantized) L2 norm plus, per entry, a sign
//! and an integer level in {0, ..., s}:
//!
//! ```text
//!   r_i = |x_i| / ||x||_2 * s              (in [0, s])
//!   level_i = floor(r_i) + Bernoulli(r_i - floor(r_i))
//!   decode: ||x||_2 * sign(x_i) * level_i / s
//! ```
//!
//! The rounding makes the decode an unbiased estimate of x with relative
//! second moment
//!
//! ```text
//!   E ||Q(x) - x||^2 <= omega^2 ||x||^2,   omega^2 = min(d/s^2, sqrt(d)/s)
//! ```
//!
//! Bit accounting per transmitted message of dimension d: each entry costs
//! log2(s) + 1 bits (level plus sign), the norm and the piggybacked y scalar
//! travel unquantized at norm_bits / scalar_bits each (54 by convention).
//! The identity (lossless) kind models exact communication: every entry at
//! norm_bits plus the y scalar.
//!
//! Determinism contract: quantizing a nonzero d-vector consumes exactly one
//! uniform draw per entry, in index order, from the caller-provided stream;
//! a zero vector consumes none. Replay code relies on this exact schedule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bit widths for the full-precision scalars accompanying a message.
pub const DEFAULT_NORM_BITS: u32 = 54;
pub const DEFAULT_SCALAR_BITS: u32 = 54;

// ---------------------------------------------------------------------------
// QuantizerSpec
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantizerKind {
    /// Lossless passthrough (exact communication baseline).
    Identity,
    /// Stochastic level quantization with `s` levels.
    StochasticLevels { s: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub kind: QuantizerKind,
    pub norm_bits: u32,
    pub scalar_bits: u32,
}

impl QuantizerSpec {
    pub fn identity() -> Self {
        Self {
            kind: QuantizerKind::Identity,
            norm_bits: DEFAULT_NORM_BITS,
            scalar_bits: DEFAULT_SCALAR_BITS,
        }
    }

    /// Stochastic kind with `s` levels; `s` must be a power of two so the
    /// per-entry bit count log2(s) + 1 is integral.
    pub fn levels(s: u32) -> Result<Self> {
        if s == 0 || !s.is_power_of_two() {
            return Err(Error::ConfigInvalid {
                field: "quant",
                reason: format!("level count {s} is not a power of two >= 1"),
            });
        }
        Ok(Self {
            kind: QuantizerKind::StochasticLevels { s },
            norm_bits: DEFAULT_NORM_BITS,
            scalar_bits: DEFAULT_SCALAR_BITS,
        })
    }

    /// Parse `identity` or `levels:<s>`.
    pub fn parse(text: &str) -> Result<Self> {
        if text == "identity" {
            return Ok(Self::identity());
        }
        if let Some(s) = text.strip_prefix("levels:") {
            let s: u32 = s.parse().map_err(|_| Error::ConfigInvalid {
                field: "quant",
                reason: format!("bad level count in '{text}'"),
            })?;
            return Self::levels(s);
        }
        Err(Error::ConfigInvalid {
            field: "quant",
            reason: format!("unknown quantizer '{text}' (expected identity or levels:<s>)"),
        })
    }

    /// Bits per encoded entry: level bits plus one sign bit. Zero for the
    /// identity kind (entries travel at norm_bits instead).
    pub fn entry_bits(&self) -> u32 {
        match self.kind {
            QuantizerKind::Identity => 0,
            QuantizerKind::StochasticLevels { s } => s.trailing_zeros() + 1,
        }
    }

    /// Relative second-moment bound omega^2 for dimension `d`.
    pub fn omega_sq(&self, d: usize) -> f64 {
        match self.kind {
            QuantizerKind::Identity => 0.0,
            QuantizerKind::StochasticLevels { s } => {
                let s = s as f64;
                let d = d as f64;
                (d / (s * s)).min(d.sqrt() / s)
            }
        }
    }

    /// Whether the compressor contracts at all at dimension `d`
    /// (omega^2 < 1); a non-contracting compressor can amplify the replica
    /// residual round over round.
    pub fn admissible(&self, d: usize) -> bool {
        self.omega_sq(d) < 1.0
    }

    /// Total transmitted bits for one message of dimension `d`.
    pub fn message_bits(&self, d: usize) -> u64 {
        let d = d as u64;
        match self.kind {
            QuantizerKind::Identity => d * self.norm_bits as u64 + self.scalar_bits as u64,
            QuantizerKind::StochasticLevels { .. } => {
                d * self.entry_bits() as u64 + self.norm_bits as u64 + self.scalar_bits as u64
            }
        }
    }
}

// ---------------------------------------------------------------------------
// QuantizedMessage
// ---------------------------------------------------------------------------

/// Wire payload of one broadcast.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Lossless entries (identity kind).
    Exact(Vec<f64>),
    /// Quantized entries: shared norm, per-entry sign and level in [0, s].
    Levels {
        norm: f64,
        signs: Vec<i8>,
        levels: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMessage {
    pub payload: Payload,
    /// Sender's push-sum weight, piggybacked unquantized. Filled in by the
    /// round logic (the quantizer itself does not know y).
    pub y: f64,
}

impl QuantizedMessage {
    pub fn dim(&self) -> usize {
        match &self.payload {
            Payload::Exact(v) => v.len(),
            Payload::Levels { levels, .. } => levels.len(),
        }
    }
}

// ---------------------------------------------------------------------------
// Encode / decode
// ---------------------------------------------------------------------------

/// Encode `x` under `spec`, drawing rounding decisions from `rng`.
///
/// Stochastic kind: exactly one uniform draw per entry of a nonzero vector
/// (in index order); zero vectors draw nothing and encode as norm 0 with all
/// levels 0. Entries whose scaled ratio r_i is exactly integral keep
/// floor(r_i) deterministically (the up-rounding probability is 0).
pub fn quantize(x: &[f64], spec: &QuantizerSpec, rng: &mut ChaCha8Rng) -> QuantizedMessage {
    let s = match spec.kind {
        QuantizerKind::Identity => {
            return QuantizedMessage {
                payload: Payload::Exact(x.to_vec()),
                y: 0.0,
            }
        }
        QuantizerKind::StochasticLevels { s } => s,
    };
    let norm = l2_norm(x);
    let d = x.len();
    let mut signs = vec![1i8; d];
    let mut levels = vec![0u32; d];
    if norm == 0.0 {
        return QuantizedMessage {
            payload: Payload::Levels { norm, signs, levels },
            y: 0.0,
        };
    }
    let sf = s as f64;
    for (i, &xi) in x.iter().enumerate() {
        let r = xi.abs() / norm * sf;
        let l = r.floor();
        // r <= s up to rounding; clamp so levels never exceed s.
        let (l, p) = if l >= sf { (sf, 0.0) } else { (l, r - l) };
        let u: f64 = rng.gen();
        let up = u < p;
        signs[i] = if xi < 0.0 { -1 } else { 1 };
        levels[i] = l as u32 + u32::from(up);
    }
    QuantizedMessage {
        payload: Payload::Levels { norm, signs, levels },
        y: 0.0,
    }
}

/// Decode a message back to a d-vector.
pub fn dequantize(m: &QuantizedMessage, spec: &QuantizerSpec) -> Result<Vec<f64>> {
    match (&m.payload, spec.kind) {
        (Payload::Exact(v), QuantizerKind::Identity) => Ok(v.clone()),
        (Payload::Levels { norm, signs, levels }, QuantizerKind::StochasticLevels { s }) => {
            if signs.len() != levels.len() {
                return Err(Error::MalformedMessage(format!(
                    "sign/level length mismatch: {} vs {}",
                    signs.len(),
                    levels.len()
                )));
            }
            if !(*norm >= 0.0) {
                return Err(Error::MalformedMessage(format!("negative or NaN norm {norm}")));
            }
            if let Some(&bad) = levels.iter().find(|&&l| l > s) {
                return Err(Error::MalformedMessage(format!("level {bad} exceeds s = {s}")));
            }
            if *norm == 0.0 && levels.iter().any(|&l| l != 0) {
                return Err(Error::MalformedMessage(
                    "zero norm with nonzero levels".into(),
                ));
            }
            let sf = s as f64;
            Ok(levels
                .iter()
                .zip(signs)
                .map(|(&l, &sg)| norm * sg as f64 * (l as f64 / sf))
                .collect())
        }
        _ => Err(Error::MalformedMessage(
            "payload kind does not match quantizer spec".into(),
        )),
    }
}

/// Plain sum-of-squares L2 norm, accumulated in index order. Replays of the
/// encoder must use this exact accumulation so ratios match bit for bit.
pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
