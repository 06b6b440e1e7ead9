//! ECG processing toolkit: waveform I/O, signal conditioning, stochastic 1D
//! augmentation, wavelet/Fourier time-frequency images, small from-scratch CNN
//! classifiers, gold-set evaluation metrics, and a deterministic simulator of
//! chunk-parallel inference orchestration.
//!
//! The pipeline, end to end:
//!
//! ```text
//! waveform -> chunks (8 s, 1 s overlap) -> conditioning -> augmentation
//!          -> 300x300 scalogram -> CNN -> per-chunk probability -> aggregate verdict
//! ```
//!
//! Each stage lives in its own module and is usable on its own.

pub mod augment;
pub mod error;
pub mod eval;
pub mod nn;
pub mod orchestrate;
pub mod preprocess;
pub mod signalio;
pub mod timefreq;

pub use error::{Error, Result};
pub use signalio::{ChunkLabel, ChunkSet, EcgTrace, Lead};
