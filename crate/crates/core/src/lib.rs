//! Reinforcement learning for masked diffusion language models as guided
//! denoiser self-distillation.
//!
//! The crate is `no_std` (with `alloc`) and free of IO. It contains:
//!
//! - [`numerics`]: flat parameter vectors, a small reverse-mode tape and a
//!   central-difference gradient oracle.
//! - [`mdm`] and [`denoiser`]: vocabulary, forward masking, the tabular and
//!   MLP denoiser families, sequence log-probabilities and the Monte-Carlo
//!   ELBO.
//! - [`decoder`]: iterative re-masking samplers and the exact distribution
//!   they induce on enumerable instances.
//! - [`objectives`]: group advantages, logit centralization, the guided
//!   teacher, the self-distillation loss and the ELBO-based baselines.
//! - [`oracles`]: brute-force partition functions, teachers, likelihoods and
//!   the training/inference mismatch analyzer.
//! - [`tasks`] and [`trainer`]: toy verifiable-reward tasks and the training
//!   loop.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod decoder;
pub mod denoiser;
pub mod error;
pub mod mdm;
pub mod numerics;
pub mod objectives;
pub mod oracles;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
