//! Conductor/Creator engine for synchronized audio-video dialogue
//! generation on synthetic modality streams.
//!
//! The pipeline splits dialogue into an understanding model (the conductor,
//! which turns multimodal queries into decoupled speech/motion directives)
//! and a generation model (the creator, which renders directives into
//! interleaved audio-token and video-latent clips with an AR audio head and
//! a flow-matching video head). A closed-form synthetic world supplies
//! training data and exact evaluation oracles.

pub mod checkpoint;
pub mod conductor;
pub mod config;
pub mod creator;
pub mod directive;
pub mod error;
pub mod fusion;
pub mod generate;
pub mod infer;
pub mod params;
pub mod report;
pub mod rng;
pub mod sequence;
pub mod tape;
pub mod training;
pub mod types;
pub mod wire;
pub mod world;

pub use config::{validate_config, ModelConfig};
pub use error::{Error, Result};
