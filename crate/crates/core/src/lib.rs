//! Tile-level anomaly detection for slide image corpora.
//!
//! The recipe: train a small convolutional encoder on an auxiliary
//! multi-class corpus (cross-entropy plus a center loss on selected
//! classes, with stain-aware color mix-up augmentation), then fit a
//! one-class SVM on the encoder's features for the single class of
//! interest. At inference every tile gets a decision value; negative
//! values flag anomalies, and per-slide statistics aggregate them.
//!
//! Modules:
//! - [`synth`]: synthetic corpus generator used for end-to-end checks
//! - [`nn`]: the encoder (forward, backward, SGD) with no autograd
//! - [`loss`]: softmax cross-entropy, center loss, running class centers
//! - [`augment`]: class mix-up via histogram matching, color jitter
//! - [`ocsvm`]: nu one-class SVM with an RBF kernel
//! - [`pipeline`]: tiling, normalization, scoring, slide aggregation
//! - [`metrics`]: balanced accuracy, F1, ROC/AUROC, seed summaries
//! - [`train`]: training loops tying the pieces together
//! - [`ablation`]: the variant grid (mix-up off, center loss off, ...)

pub mod ablation;
pub mod artifact;
pub mod augment;
pub mod config;
pub mod error;
pub mod loss;
pub mod manifest;
pub mod mat;
pub mod metrics;
pub mod nn;
pub mod ocsvm;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tile;
pub mod train;

pub use error::{Error, Result};
