//! TDM: a diffusion-based sequential recommender that simulates missing
//! interactions in its guidance signals via dual-side Thompson sampling.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`corpus`]: sequence ingestion, splits, synthetic data, missing-data
//!   injection;
//! - [`model`]: embedding table, transformer encoder, MLP denoiser, and
//!   their hand-written reverse-mode gradients;
//! - [`dts`]: continuity/stability scoring and Thompson-sampled editing;
//! - [`diffusion`]: noise schedule, training loss, reverse process;
//! - [`trainer`]: optimization loop, checkpoints, resumption;
//! - [`eval`]: retrieval, ranking metrics, ablations, robustness sweeps.

pub mod checkpoint;
pub mod corpus;
pub mod diffusion;
pub mod dts;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Result, TdmError};
