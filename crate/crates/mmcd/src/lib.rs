//! Multi-classifier maximum-discrepancy adversarial training for
//! unsupervised domain adaptation, at desk scale.
//!
//! The pieces, bottom to top:
//!
//! - [`autodiff`]: a tape-based reverse-mode AD engine over dense f64
//!   tensors, plus SGD parameter blocks with per-step freezing.
//! - [`model`]: a feature extractor feeding `n` classifier heads.
//! - [`losses`]: cross-entropy and the pairwise / all-pairs classifier
//!   discrepancy loss family, including the ablation variants.
//! - [`data`]: toy 2D source/target dataset generation, CSV ingestion,
//!   and decision-boundary grid export.
//! - [`training`]: the three-step adversarial training loop with
//!   parameter freezing and metrics logging.
//! - [`experiments`]: the `train` / `eval` / `ablate` / `bench`
//!   commands behind the `mmcd` binary.

pub mod autodiff;
pub mod data;
pub mod experiments;
pub mod losses;
pub mod model;
pub mod training;

mod error;

pub use error::{Error, Result};
