//! Facial expression transfer, editing and recognition with a two-encoder GAN.
//!
//! The generator splits into an expression encoder, an identity encoder and a
//! decoder; a shared-trunk discriminator classifies expression (plus a fake
//! class) and identity, and two small embedding discriminators drive
//! adversarial consistency losses through a gradient reversal layer. Training
//! runs a two-stage curriculum: supervised encoder pretraining, then the full
//! adversarial loop. Everything is pure Rust on f64 ndarray tensors, so runs
//! are deterministic and checkpoints round-trip bit-exactly.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
