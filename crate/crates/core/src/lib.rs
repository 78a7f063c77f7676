//! Source-free domain adaptation of a feature classifier.
//!
//! A model pre-trained on a labeled source corpus is adapted to an unlabeled
//! target corpus with three terms: a nearest-neighbour contrastive loss over a
//! feature memory bank, a pseudo-label supervised contrastive loss using a
//! score bank, and a diversity regulariser on the mean prediction. Source data
//! is never touched after pre-training.
//!
//! Modules, bottom-up:
//! - [`grad`]: tape-based reverse-mode differentiation over `f64` arrays
//! - [`model`]: MLP feature extractor plus linear classifier, JSON persistence
//! - [`banks`]: feature and score banks, cosine k-NN, pseudo-label lookup
//! - [`losses`]: the adaptation losses and label-smoothed cross-entropy
//! - [`trainer`]: pre-training and the adaptation loop with momentum SGD
//! - [`data`]: corpus files and the synthetic domain-shift generator
//! - [`eval`]: UAR, confusion matrix, cluster quality, PCA projection
//! - [`cli`]: the `ecan` command-line tool

pub mod banks;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod losses;
pub mod model;
pub mod trainer;

pub use banks::{knn, same_class_set, Banks, FeatureBank, ScoreBank};
pub use data::{generate_pair, load_corpus, save_corpus, Corpus, ShiftSpec};
pub use error::{EcanError, Result};
pub use eval::{evaluate, project_2d, EvalReport};
pub use grad::{Tape, Tensor, Var};
pub use losses::{HyperParams, LossBreakdown};
pub use model::{EcanModel, ModelSpec};
pub use trainer::{adapt, pretrain, Ablation, RunLog};
