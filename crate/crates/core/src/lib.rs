pub mod autodiff;
pub mod codec;
pub mod convert;
pub mod error;
pub mod evaluation;
pub mod event_frame;
pub mod event_io;
pub mod fft;
pub mod frame;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
