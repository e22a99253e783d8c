//! Differentiable ternary quantization-aware training.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]), the
//! ternary quantizers ([`quantizer`]), pressure/temperature schedules
//! ([`schedules`]), Hutch++ sensitivity calibration ([`sensitivity`]), toy
//! models and synthetic tasks ([`models`]), and the training loop with STE
//! and full-precision baselines ([`trainer`]).

pub mod autodiff;
pub mod check;
pub mod config;
pub mod error;
pub mod experiment;
pub mod models;
pub mod quantizer;
pub mod rng;
pub mod schedules;
pub mod sensitivity;
pub mod trainer;

pub use error::{HestiaError, Result};
