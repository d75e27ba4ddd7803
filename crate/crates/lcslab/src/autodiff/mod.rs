//! Minimal reverse-mode differentiation engine and optimizer.
//!
//! Values live on an eager tape: every operation computes its result
//! immediately and records what it needs for the reverse pass. The backward
//! sweep walks nodes in reverse creation order, so gradient accumulation
//! order is fixed and runs are reproducible bit for bit. All in-memory
//! arithmetic is f64; checkpoints are stored as little-endian f32.

mod params;
mod tape;

pub use params::{ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{Gradients, Tape, Var};
