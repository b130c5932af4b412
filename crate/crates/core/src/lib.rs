//! Two-stage audio-driven lip sync on synthetic speakers.
//!
//! Stage 1 ([`lipmotion`]) predicts mouth parameters of a linear face model
//! ([`face3dmm`]) from audio features, aggregating a speaker's style from a
//! short reference clip. Stage 2 ([`renderer`]) renders the mouth region with
//! a conditional latent diffusion model. [`synthworld`] generates speakers
//! with known style functions, [`evalkit`] measures the results, and [`cli`]
//! ties everything together.

pub mod cli;
pub mod container;
pub mod error;
pub mod evalkit;
pub mod face3dmm;
pub mod layers;
pub mod lipmotion;
pub mod renderer;
pub mod rng;
pub mod synthworld;
pub mod workers;

pub use error::{Error, Result};
