//! Multi-channel audiovisual emotion recognition: room acoustics simulation,
//! multi-microphone feature extraction, audio and video encoders, late fusion,
//! training and evaluation.

pub mod acoustics;
pub mod audio_encoder;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod frontend;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod synth;
pub mod train;
pub mod video;
pub mod wav;

pub use error::{Error, Result};
