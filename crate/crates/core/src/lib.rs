//! Dehazing network with routed multi-scale window attention and frequency
//! band modulation, plus the reverse-mode tape, kernels, data synthesis and
//! training loop it runs on.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod haze;
pub mod lfpm;
pub mod metrics;
pub mod mkra;
pub mod mkram;
pub mod network;
pub mod ops;
pub mod reference;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use network::{KsformerModel, NetworkConfig, Variant};
pub use tensor::{Indices, Tensor};
