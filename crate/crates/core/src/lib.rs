//! EchoIR building blocks: an autodiff tensor core, mix-attention blocks,
//! the echo upsampler, the restoration network, image metrics and the
//! barrier-based bilevel optimizer used to train it.

pub mod asblo;
pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod upsampler;

pub use tensor::{Precision, Result, Tensor, TensorError};
