//! Recurrent multi-frame feature aggregation (MFFA) for binary video
//! segmentation, with the tensor engine, losses, data tooling and trainer
//! needed to run it end to end on CPU.

pub mod dataio;
pub mod error;
pub mod frame;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod mffa;
pub mod model;
pub mod par;
pub mod real;
pub mod synthseq;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use frame::{FrameSequence, Mask, RgbImage};
pub use real::Real;
pub use tensor::{Padding, ParamStore, Tape, Tensor, Var};
