//! Transformer layers of a pretrained decoder-only language model reused as
//! the encoder of a CTC speech recognizer, with everything needed to study
//! the idea at desk scale: an autograd engine, log-mel features, a synthetic
//! speech-like corpus, the language model, CTC, encoder assembly and an
//! experiment harness.

pub mod checkpoint;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod features;
pub mod lm;
pub mod nn;
pub mod rng;
pub mod study;
pub mod tensor;
pub mod transformer;

pub use error::{PalError, Result};
pub use rng::Seed;
pub use tensor::{MaskMode, Precision, Real, Tensor};
