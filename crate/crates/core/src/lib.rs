//! Semi-supervised segmentation with a shared encoder, several decoders that
//! differ only in their up-sampling layers, and a mutual consistency loss
//! between each decoder's probabilities and the others' sharpened outputs.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod objective;
pub mod pgm;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
