//! Deep convolutional/recurrent attention encoder-decoder for character-level
//! transcription, built on a minimal reverse-mode tensor engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors with a per-step computation tape and reverse-mode
//!   differentiation, plus a finite-difference checking harness.
//! - [`layers`]: LSTM/BLSTM, bidirectional convolutional LSTM, strided
//!   convolutions, sequence-wise batch normalization, NiN 1x1 modules,
//!   projected subsampling, and residual blocks.
//! - [`arch`]: the architecture string notation (`"(L + P/2 + B + R) x 2 + L"`)
//!   with a parser, canonical renderer, and shape-propagating elaborator.
//! - [`model`]: the listen/attend/spell encoder-decoder assembled from an
//!   elaborated architecture graph.
//! - [`train`]: ADAM, global-norm clipping, Gaussian weight noise, L2 decay,
//!   LR decay on dev plateau, and the teacher-forced training loop.
//! - [`data`]: synthetic utterance generation, delta features, per-speaker
//!   normalization, and the `FBK1` feature-file format.
//! - [`decode`], [`metrics`], [`checkpoint`]: greedy/beam decoding, edit
//!   distance and CER/WER scoring, checkpoint save/load.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Init, Tensor};
