//! Mispronunciation detection with a hybrid CTC-attention phone recognizer.

pub(crate) mod autodiff;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod hypothesis;
pub mod joint;
pub mod md;
pub mod model;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
