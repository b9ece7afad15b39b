//! Hierarchical domain adaptation of a frozen causal language model with
//! tree-structured adapters.

pub mod adapters;
pub mod cli;
pub mod clustering;
pub mod costmodel;
pub mod domtree;
pub mod error;
pub mod format;
pub mod lm;
pub mod numcore;
pub mod params;
pub mod routing;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
