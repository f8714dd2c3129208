//! PSAD: personalized semi-autoregressive reranking with online knowledge
//! distillation, at desk scale.
//!
//! A semi-autoregressive generative teacher (PSAD-G) and a lightweight
//! scoring student (PSAD-S) share an encoder and train jointly; the teacher's
//! probability matrix is distilled into the student on the fly. A User
//! Profile Network personalizes item representations and position biases.
//! Everything runs on a small tape-based f64 autodiff engine.

pub mod autodiff;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
