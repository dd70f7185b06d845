//! Feature-level knowledge distillation with margin-loss heads, group-balanced
//! sampling and per-group verification metrics, on toy face-like universes.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod manifest;
pub mod parallel;
pub mod rng;
pub mod sampling;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
