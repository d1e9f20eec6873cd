//! Meta-initialization for single-image depth regression.
//!
//! The crate is organised around a two-stage pipeline:
//!
//! 1. stage 1 learns a network initialisation ("prior") from a dataset of
//!    fine-grained tasks, where each task is a single RGB-D pair
//!    ([`metainit`]);
//! 2. stage 2 trains a depth regressor from that initialisation with plain
//!    supervised learning ([`trainer`]).
//!
//! Supporting modules: dense tensors and a layer-wise reverse-mode gradient
//! engine ([`tensor`], [`net`]), a procedural RGB-D scene generator
//! ([`scenes`]), the depth metric suite and evaluation protocols ([`eval`]),
//! pinhole geometry and point-cloud export ([`geometry`]), and binary
//! checkpointing ([`checkpoint`]).
//!
//! All numeric entry points are generic over [`tensor::Scalar`] (`f32` or
//! `f64`) so the same code path serves fast training and high-precision
//! verification.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod finitediff;
pub mod geometry;
pub mod metainit;
pub mod net;
pub mod optim;
pub mod par;
pub mod params;
pub mod scenes;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::ParamVector;
pub use tensor::{Mask, Scalar, Tensor};
