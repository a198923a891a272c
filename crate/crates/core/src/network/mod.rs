//! Network architecture, initialization, forward pass and checkpoints.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, model_from_checkpoint_bytes, read_checkpoint_header,
    save_checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{Activation, ArchConfig, LayerSpec, MIN_HIDDEN_WIDTH};
pub use model::{
    init_model, softmax_rows, BatchNorm, BatchNormTrace, Dense, ForwardMode, ForwardTrace,
    LayerTrace, Model, ParamId, ParamKind, Section, BN_EPS, BN_MOMENTUM,
};
