//! Desk-scale laboratory for comparing autoencoder pretraining losses.
//!
//! Three reconstruction targets are supported: raw pixels, activations of a
//! frozen perceptual network compared against the same activations of the
//! reconstruction, and direct prediction of those activations. Each target is
//! paired with image- or feature-space codecs, giving six named training
//! procedures. Embedding quality is measured by small probe MLPs, and training
//! cost by an analytic FLOP model plus wall-clock benchmarks.
//!
//! Everything runs on a from-scratch f64 tape autodiff engine. The design
//! trades speed for verifiability: every backward rule is checked against
//! central finite differences, and every pipeline output is byte-reproducible
//! for a fixed seed.

pub mod benchmark;
pub mod datasets;
pub mod evaluation;
pub mod losses;
pub mod nets;
pub mod procedures;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
