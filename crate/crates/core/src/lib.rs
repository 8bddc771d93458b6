//! Out-of-distribution aware text classification.
//!
//! The pipeline generates pseudo-outlier sentences by steering an n-gram
//! sampler toward an out-domain bag of words, keeps only the candidates
//! that land in a shell just outside the in-domain embedding cluster,
//! trains a softmax classifier with cross-entropy on in-domain data plus a
//! penalty pulling outlier predictions toward the uniform distribution,
//! and detects outliers by their maximum softmax probability.
//! Evaluation covers AUROC, AUPR, FPR at 90% TPR and expected calibration
//! error, with optional post-hoc Dirichlet calibration.

pub mod calibrate;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod evaluate;
pub mod filter;
pub mod generate;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
