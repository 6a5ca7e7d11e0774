//! Spatio-temporal matching tracker at desk scale.

pub mod arm;
pub mod error;
pub mod features;
pub mod head;
pub mod io;
pub mod matching;
pub mod model;
pub mod ops;
pub mod sim;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Error, Result, Shape3};
pub use head::BoundingBox;
pub use tensor::{KernelBank, PeakLocation, Tensor2, Tensor3};
