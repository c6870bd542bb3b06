//! Lie-access neural Turing machines and their baselines on a small
//! reverse-mode autodiff core.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); aliases below fix the common choices.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod error;
pub mod evaluation;
pub mod lie_groups;
pub mod memory;
pub mod models;
pub mod params;
pub mod pca;
pub mod scalar;
pub mod tasks;
pub mod trace;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
