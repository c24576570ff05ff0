//! The assembled system: configuration, networks, two-stage training,
//! checkpointing, and inference.

pub mod checkpoint;
mod config;
pub mod synth;
pub mod train;
mod tts;

pub use config::ModelConfig;
pub use tts::{EncoderOut, TtsModel};
