//! Masks, saliency scores, and the selection step shared by gradual and
//! one-shot pruning.

mod mask;
mod saliency;
mod scope;
mod select;

pub use mask::{load_masks, save_masks, Mask, MaskManifest, MaskSet};
pub use saliency::{diagonal_fisher, fisher_scores, magnitude_scores, obd_scores, Saliency, FISHER_DAMPENING};
pub use scope::{Granularity, ScopePolicy};
pub use select::{apply_masks, one_shot_prune, select_prune, target_count, Pruner};
