//! Reverse-mode differentiation and the coordinate network.

pub mod mlp;
pub mod tape;
pub mod weights_io;

pub use mlp::{EvalBatch, MlpGraph, MlpParams, LAYER_SIZES};
pub use tape::{Gradients, NodeId, Tape};
pub use weights_io::{load_weights, save_weights, Normalization, WeightFileHeader};
