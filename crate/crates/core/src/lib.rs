//! Adapter-based audio-visual speech recognition at desk scale: a frozen
//! encoder-decoder recognizer, swappable low-rank adapter sets with an
//! audio-visual fusion front end, teacher-student distillation, and a
//! noise-scenario classifier that routes each utterance to an adapter set.

pub mod asr;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod registry;
pub mod seed;
pub mod selector;
pub mod signal;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
