//! Recurrent video super-resolution with refocused intra/inter-frame
//! transformer blocks, trained by truncated backpropagation over long
//! sequences.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff on dense tensors (explicit tape).
//! - [`ritb`]: the windowed cross-frame attention block and its gated FFN.
//! - [`propagation`]: bidirectional second-order recurrent feature
//!   propagation with patch alignment.
//! - [`model`]: the full network, its checkpoint format, and the two forward
//!   modes (full-sequence without gradients, short-clip with gradients).
//! - [`training`]: Adam, clip sampling, the truncated and vanilla training
//!   strategies, and the strategy benchmark harness.
//! - [`data`]: synthetic video generation, bicubic resampling, on-disk
//!   formats.
//! - [`metrics`]: PSNR and SSIM.

pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod propagation;
pub mod ritb;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
