//! Dual-mode transducer speech recognition at toy scale: one encoder whose
//! weights serve both streaming and full-context inference.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;
pub mod transducer;

pub use error::{Error, Result};
pub use layers::Mode;
