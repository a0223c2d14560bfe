//! Contrastive-adversarial domain adaptation at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: define-by-run reverse-mode differentiation, including the
//!   gradient-reversal operator.
//! - [`nn`]: dense layers and the generator / classifier / discriminator model.
//! - [`losses`]: cross-entropy, adversarial, supervised contrastive and
//!   cross-domain contrastive losses.
//! - [`schedule`]: stage gating and the λ / β loss-weight ramps.
//! - [`data`]: synthetic domain-shift generators, IDX loading, paired batching.
//! - [`trainer`]: the staged training loop, AdamW and pseudo-labeling.
//! - [`metrics`]: history CSV, embedding dumps, PCA and SVG scatter plots.
//! - [`config`]: the run-config file format used by the `cda` binary.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
