//! Dense fine-tuning, gradual and one-shot pruning runs, and evaluation.

mod recipe;
mod runlog;
mod trainer;

pub use recipe::{DenseSection, LrSettings, PruneSection, PruningRecipe, SparsitySettings, PRESET_NAMES, TOY_DENSE_LR};
pub use runlog::{EvalRecord, PruneEvent, RunLog, StepRecord};
pub use trainer::{
    encoder_sparsity, evaluate, gradual_prune, gradual_prune_with, mix_seed, train_dense, PruneOutcome, RunObserver,
    RunOptions, TaskData,
};
