//! Uncertainty-aware, prompt-driven 3D tumour segmentation.
//!
//! The crate covers the volume data model ([`volgrid`]), the four networks
//! ([`netblocks`]), the training objective ([`losses`]), the iterative
//! prompt-refinement loop ([`promptloop`]), optimisation ([`trainer`]),
//! sliding-window evaluation ([`inference`]), the five evaluation metrics
//! ([`metrics`]) and rank statistics ([`stats`]).

pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod netblocks;
pub mod promptloop;
pub mod stats;
pub mod trainer;
pub mod volgrid;

pub use error::{Error, Result};
