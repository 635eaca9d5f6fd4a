//! Network assembly, presets and checkpoints.

mod checkpoint;
mod config;
mod net;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError,
    FORMAT_VERSION, MAGIC,
};
pub use config::{ConfigError, DilationPolicy, ModelConfig};
pub use net::{build_model, Model, ParamCount, SIZE_MULTIPLE, UPSAMPLE_KERNEL};
