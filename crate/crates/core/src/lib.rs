//! Training-free multi-shot subject consistency for a toy latent video
//! denoiser.
//!
//! The crate covers framewise subject-driven self-attention across shots,
//! query preservation and flow-guided query injection from a vanilla pass,
//! refinement injection of attention outputs on both guidance passes, and the
//! metrics used to evaluate them. Everything runs on a small deterministic
//! attention-only denoiser so each mechanism can be checked against
//! brute-force references.

pub mod attention;
pub mod audit;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod query_control;
pub mod refinement;
pub mod seeding;
pub mod subject_mask;
pub mod tensor;

pub use error::{Error, Result};
pub use par::Parallelism;
pub use tensor::Tensor;
