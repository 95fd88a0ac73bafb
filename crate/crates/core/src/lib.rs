//! Diversified dynamic routing.
//!
//! A gated multi-scale routing network whose per-input gate activations
//! (its "architecture" for that input) are pulled towards K prototype
//! routes by a margin clustering loss, with the prototypes refit by
//! K-means between gradient phases.
//!
//! - [`autodiff`]: dense tensors and the reverse-mode tape.
//! - [`lattice`]: the routing network and its A-space of gate activations.
//! - [`loss`]: task, cost and clustering losses.
//! - [`clustering`]: K-means over A-space and route-diversity diagnostics.
//! - [`trainer`]: the alternating optimization loop and evaluation.
//! - [`synth`]: scale-biased synthetic segmentation data.
//! - [`harness`]: experiment configuration, recipes and exports.

pub mod autodiff;
pub mod clustering;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod loss;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
