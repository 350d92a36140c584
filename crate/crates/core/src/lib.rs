pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gpt;
pub mod gradcheck;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod refine;
pub mod synth;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
