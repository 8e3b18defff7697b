//! Sparse (L0) adversarial attacks with distortion-aware pixel selection.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tape`]),
//! feed-forward models and training ([`nn`]), a GAN-based perceptual
//! distortion map ([`distortion`]), the two-stage greedy attack itself
//! ([`attack`]), dataset and image I/O ([`data`]), and an evaluation
//! harness ([`eval`]).

pub mod attack;
pub mod data;
pub mod distortion;
pub mod eval;
pub mod kernels;
pub mod loss;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use attack::{greedyfool, AttackConfig, AttackError, AttackResult};
pub use distortion::{DistortionMap, GanConfig};
pub use nn::{Arch, InputSpec, Model, TrainConfig};
pub use tensor::{Tensor, TensorError};
