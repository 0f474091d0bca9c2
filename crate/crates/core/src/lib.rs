//! Class-prototype refinement under a soft orthonormality penalty.
//!
//! Class prototypes are built by averaging text embeddings over prompt templates, then
//! refined by minimizing `‖X − V‖²_F + λ‖XXᵀ − I‖²_F` either in closed form (λ = 0 or
//! the hard-constraint limit), directly over X, or through low-rank adapters on a
//! frozen encoder. Scatter diagnostics and stream-based evaluation sit alongside.

pub mod cli;
pub mod dd;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod objective;
pub mod prototype;
pub mod solvers;

pub use error::{Error, Result};
pub use linalg::EmbeddingMatrix;
