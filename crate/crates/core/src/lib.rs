//! Distributional multi-step evaluation and control operators over
//! categorical signed measures on tabular MDPs.

pub mod analysis;
pub mod engine;
pub mod error;
pub mod grid;
pub mod io;
pub mod learner;
pub mod mdp;
pub mod operators;

pub use error::{Error, Result};
