//! Design and analysis of complex discontinuity designs.

pub mod balance;
pub mod error;
pub mod estimate;
pub mod io;
pub mod matching;
pub mod model;
pub mod neighborhood;
pub mod pipeline;
pub mod ridge;
pub mod rules;
pub mod sensitivity;
pub mod stats;
pub mod synth;
pub mod weights;

pub use error::{Error, Result};
