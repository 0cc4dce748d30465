//! Reconstruction of 3D objects from short, partially occluded image
//! sequences by filtering a population of latent hypotheses under a
//! generative voxel-field prior, followed by generator refinement.

pub mod diff;
pub mod error;
pub mod evalkit;
pub mod finv;
pub mod generator;
pub mod harness;
pub mod objectives;
pub mod optimizer;
pub mod priorlab;
pub mod renderer;
pub mod seeds;

pub use error::{FinvError, Result};
