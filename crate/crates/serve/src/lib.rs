//! HTTP session service and command-line front end for the segmentation
//! pipeline.

pub mod api;
pub mod cli;
