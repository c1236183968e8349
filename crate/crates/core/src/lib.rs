//! Mel spectrogram enhancement with an auxiliary continuous-wavelet task.
//!
//! The crate covers the whole feature and training path:
//!
//! - [`tensor`]: dense `f32` tensors and the `FTN1` binary file format
//! - [`audio`]: PCM16 WAV ingestion and deterministic synthetic signals
//! - [`melspec`]: STFT, HTK Mel filterbank, log-Mel extraction and padding
//! - [`cwt`]: Morlet continuous wavelet transform (direct and FFT paths)
//! - [`lowrank`]: one-sided Jacobi SVD and a corpus-global truncated basis
//! - [`nets`]: shared trunk, Post-Net and CWT-Net with hand-written backward passes
//! - [`train`]: wavelet/baseline losses, Adam and the training loop

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod cwt;
pub mod error;
pub mod lowrank;
pub mod melspec;
pub mod nets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
