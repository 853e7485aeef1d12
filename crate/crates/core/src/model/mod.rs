//! Micro masked language model and the fairness stamp adapter.

pub mod config;
pub mod stamp;
pub mod transformer;
pub mod weights;

pub use config::{Activation, ModelConfig};
pub use stamp::{FairnessStamp, STAMP_KEY_STD};
pub use transformer::{
    ForwardTrace, GraphOutput, MicroTransformer, PatchSite, PatchSpec, SeqBatch, StampBinding,
};
pub use weights::{parameter_shapes, LayerWeights, Weights};

#[cfg(test)]
mod tests;
