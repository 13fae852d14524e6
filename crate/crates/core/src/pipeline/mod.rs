//! Data generation, model assembly, training, checkpoints and evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod train;

pub use config::{ModelConfig, Variant};
pub use data::{gen_synthetic_dataset, Dataset, GenConfig, PatchBag, Split, Synthetic, Vocabulary};
pub use model::{ImageEval, ImageTargets, Model, Prepared};
pub use checkpoint::Checkpoint;
pub use train::{StepRecord, Trainer};
