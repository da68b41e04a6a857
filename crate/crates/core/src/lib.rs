//! Multi-relational graph convolution with multi-task decoders.
//!
//! The encoder propagates node representations through every relation of a
//! directed multi-relational graph (plus each relation's reversal and an
//! identity relation), mixing the branches with a learned attention vector.
//! Decoders classify nodes into two classes and score links per relation
//! with a diagonal neural-tensor cell; training sums the task losses.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod features;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod split;
pub mod synth;

pub use error::{Error, Result};
