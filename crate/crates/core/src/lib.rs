//! Semi-supervised variational objectives with exact verification oracles.
//!
//! This crate implements the family of semi-supervised training objectives
//! built around a generative model `p(z) p(y|z) p(x|y,z)` and a factorized
//! inference model `q(y|x) q(z|x)`:
//!
//! * the classic SSVAE objective (supervised ELBO + unsupervised ELBO +
//!   weighted classification term),
//! * its importance-weighted variant SSIWAE,
//! * the partially importance-weighted objectives SSPIWO and SSiPIWO, which
//!   tighten only one of the two latent variables' KL terms.
//!
//! Everything is verifiable: the [`tabular`] module provides fully enumerable
//! finite models on which every bound, identity, and limit can be computed
//! exactly, and the [`gradients`] module pairs every stochastic gradient
//! estimator with finite-difference and exact-enumeration checks.
//!
//! The crate is `no_std` (with `alloc`); file IO, the experiment CLI, and the
//! on-disk formats live in the companion `piwo-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod dist;
pub mod fm;
pub mod gradients;
pub mod hybrid;
pub mod neural;
pub mod objectives;
pub mod quadrature;
pub mod rng;
pub mod tabular;
pub mod tape;
pub mod training;

pub use dist::{kl_gaussian_standard, Categorical, DiagonalGaussian, DistError};
pub use objectives::{BoundEstimate, Flavor, ObjectiveSpec, VariationalModel};
pub use rng::SplitMix64;
pub use tape::{GradBuf, NodeId, ParamId, ParamStore, Role, Tape};
