//! Token-level mixture-of-experts routing inside a two-way mask decoder,
//! with prompt-free feature tokens, trained on synthetic multi-modality data.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod mote;
pub mod nn;
pub mod ppt;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use harness::{SegMote, TrainConfig};
pub use tensor::{DType, Scalar, Tape, Tensor, Var};
