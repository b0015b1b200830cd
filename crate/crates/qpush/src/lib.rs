//! Deterministic simulator for quantized push-sum consensus and quantized
//! decentralized SGD over directed graphs.
//!
//! Nodes hold a value vector `x`, a scalar push-sum weight `y`, and local
//! replicas of the quantized state `x_hat` of each in-neighbor. Every round
//! each node broadcasts a quantized difference, all holders fold it into
//! their replicas, and values mix through a column-stochastic weight matrix;
//! the ratio `z = x / y` converges to the average of the initial values
//! (consensus mode) or tracks the decentralized SGD iterate (optimization
//! mode). Column stochasticity preserves total mass exactly, so conservation
//! audits hold to floating-point accuracy regardless of quantization noise.
//!
//! The crate is organized as:
//!
//! - [`graph`]: directed-graph presets, mixing matrices, spectral profiles.
//! - [`quantizer`]: unbiased stochastic quantization and bit accounting.
//! - [`rng`]: deterministic per-(node, round, purpose) random streams.
//! - [`error`]: shared error type.
//!
//! All randomness derives from a single master seed through counter-based
//! stream addressing, so runs replay bit for bit.

pub mod config;
pub mod consensus;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod oracle;
pub mod quantizer;
pub mod rng;
