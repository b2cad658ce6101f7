//! Graph information bottleneck for brain functional connectivity networks.
//!
//! A generator learns a relaxed edge mask per subject; the masked subgraph is
//! classified while its mutual information with the full graph is penalized.

pub mod encoder;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod generator;
pub mod graph;
pub mod interpret;
pub mod model;
pub mod params;
pub mod selftest;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
