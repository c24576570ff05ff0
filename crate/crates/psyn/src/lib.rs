//! Feed-forward text-to-speech engine built around three ideas:
//! windowed relative-position self-attention (no positional encodings),
//! a prosody learner that distills per-phoneme prosody vectors from the
//! mel-spectrum, and a mixture-density prosody predictor driven by word
//! embeddings. Training is two-staged: the mel predictor, duration
//! predictor and prosody learner train jointly against extracted
//! monotonic alignments, then the prosody predictor fits the learner's
//! outputs.

pub mod alignment;
pub mod attention;
pub mod corpus;
pub mod error;
pub mod features;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prosody;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
