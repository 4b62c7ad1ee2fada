//! Robust co-training: two networks annotate an unlabeled pool while
//! correcting each other, then a third network is adversarially trained on
//! the labeled data joined with those pseudo labels.
//!
//! Module map:
//! - [`ndgrad`]: tensors and reverse-mode differentiation
//! - [`nets`]: MLP classifiers and momentum SGD
//! - [`objectives`]: softmax, cross-entropy, KL/JS divergences, total variance
//! - [`attacks`]: FGSM and PGD in an L∞ ball
//! - [`data`]: generators, splits, label corruption, CSV
//! - [`annotate`]: pre-determined annotator, self-training, vanilla and deep co-training
//! - [`robustify`]: Madry and TRADES training, evaluation metrics
//! - [`harness`]: end-to-end pipeline, grids, presets and persistence

pub mod annotate;
pub mod attacks;
pub mod data;
pub mod error;
pub mod harness;
pub mod ndgrad;
pub mod nets;
pub mod objectives;
pub mod robustify;
pub mod seed;

pub use error::{Error, Result};
