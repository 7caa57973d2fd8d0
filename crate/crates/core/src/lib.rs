//! Label-free learning of semantic edit directions in a generator's latent
//! space with a gated mixture of experts.
//!
//! The pipeline: a GRU + attention gating network and a bank of convolutional
//! experts map a latent `z` to one direction per attribute. Directions are
//! trained to agree, after Jacobian pushforward through the generator, with
//! linear attribute boundaries fitted in latent space, under a KL prior
//! regularizer. Synthetic generators with known attribute structure stand in
//! for pretrained GANs so disentanglement can be measured exactly.

#![allow(clippy::needless_range_loop)]

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experts;
pub mod gating;
pub mod generator;
pub mod init;
pub mod linalg;
pub mod losses;
pub mod mdn;
pub mod optim;
pub mod sbv;
pub mod tensor;
pub mod trainer;

pub use autodiff::{jvp, DifferentiableMap, Dual, Eval, Forward, Gradients, Tape, TensorOps, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use tensor::Tensor;
