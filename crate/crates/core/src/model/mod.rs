//! Transformer-encoder classifier with per-parameter component tags.

mod arch;
pub mod checkpoint;
mod transformer;

pub use arch::{ArchitectureSpec, ComponentGroup, ComponentTag};
pub use transformer::{
    ActivationKind, Batch, ForwardConfig, ForwardOutput, Mode, Model, ParamId, ParamRole, Parameter, INIT_STD,
};
