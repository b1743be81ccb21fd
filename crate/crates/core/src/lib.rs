//! Self-play fine-tuning for small conditional diffusion models.
//!
//! The crate is organised bottom-up: [`schedule`] and [`diffusion`] define
//! the forward and reverse processes, [`score_net`] the noise-prediction
//! network with its own reverse-mode differentiation, [`losses`] every
//! training objective, [`trainer`] the optimisation loops, [`data`] the
//! synthetic target distributions and [`eval`] the quality measures.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod score_net;
pub mod trainer;

pub use error::{Error, Result};
