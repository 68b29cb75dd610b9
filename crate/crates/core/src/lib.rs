//! Length-controlled generation for a toy decoder-only transformer.
//!
//! A sinusoidal encoding that counts down to the end of the response is
//! added to the token embeddings, so the model learns when to emit EOS.
//! The crate covers the full loop: encodings, a small autodiff engine,
//! the transformer, synthetic data, training, countdown-aware decoding
//! and length-control evaluation.

pub mod config;
pub mod data;
pub mod encoding;
pub mod eval;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod verify;
