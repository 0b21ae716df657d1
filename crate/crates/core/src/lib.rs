//! Score-distillation editing of synthetic articulated figures.
//!
//! A tiny pixel-space diffusion model is trained on procedurally rendered
//! figures, personalized on one subject, and used to edit that subject's
//! residual texture through a blended, structure-conditioned guidance score
//! with windowed timestep annealing. Numeric code is generic over [`Scalar`];
//! the aliases below fix the precision.

pub mod anneal;
pub mod canvas;
pub mod container;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod grid;
pub mod guidance;
pub mod nn;
pub mod optim;
pub mod personalize;
pub mod rng;
pub mod scalar;
pub mod scorenet;
pub mod synthdata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Grid32 = grid::Grid<f32>;
pub type Grid64 = grid::Grid<f64>;
pub type ScoreNet32 = scorenet::ScoreNet<f32>;
pub type ScoreNet64 = scorenet::ScoreNet<f64>;
pub type Canvas32 = canvas::Canvas<f32>;
pub type Canvas64 = canvas::Canvas<f64>;
pub type PriorCorpus32 = personalize::PriorCorpus<f32>;
pub type PriorCorpus64 = personalize::PriorCorpus<f64>;
