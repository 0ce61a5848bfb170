//! Uncertainty-aware state-space transformer (USST) for egocentric hand
//! trajectory forecasting, at desk scale.
//!
//! The crate covers the full pipeline: camera geometry, trajectory
//! annotation and depth repair, a synthetic reach-motion dataset, the
//! network itself, its losses and the training/evaluation loop.

pub mod annotate;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
