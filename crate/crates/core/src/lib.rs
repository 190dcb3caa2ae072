//! Blind super-resolution with an explicit degradation model.
//!
//! A small extractor network estimates the blur kernel and noise map of a
//! low-resolution image, and a meta-restoration network uses those estimates
//! to upscale it. The crate also carries the synthetic degradation pipeline,
//! the kernel PCA space, the losses and trainer, and a benchmark harness.
//! The hand-written autograd in [`autograd`] drives both training and the
//! finite-difference checks.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod container;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod kernel_space;
pub mod losses;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;
