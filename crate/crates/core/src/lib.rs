//! Multi-codebook vector quantization and a small unified image tokenizer.
//!
//! The crate is organised bottom-up:
//!
//! * [`quantize`]: codebooks, VQ / MCQ / RQ quantizers, k-means fitting,
//!   EMA updates, dead-code revival and usage statistics.
//! * [`autodiff`]: a define-by-run reverse-mode tape over dense tensors.
//! * [`model`]: the toy tokenizer, with a patch encoder, factorization
//!   (linear or attention projection), quantizer, decoder and a
//!   class-embedding contrastive tower.
//! * [`losses`]: reconstruction, VQ and contrastive terms.
//! * [`train`]: configuration, optimizer, training loop and checkpoints.
//! * [`data`]: PPM images, label CSVs, synthetic shapes and vectors.
//! * [`eval`]: metrics and the quantizer / roadmap experiments.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod par;
pub mod quantize;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
