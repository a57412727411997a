//! Islanding detection from synchrophasor voltage angles.
//!
//! The crate compares two feature families for a decision-tree islanding
//! classifier:
//!
//! * **AD**: the conventional bus-pair angle difference.
//! * **CUSPAD**: the difference of two per-bus cumulative sums of angle
//!   deviation from a pre-contingency reference. A fixed additive
//!   instrumentation offset cancels inside each sum, so the feature is
//!   immune to it.
//!
//! Around the features sit the pieces needed to test the claim end to end:
//! a reduced-order swing-equation simulator ([`dynamics_sim`]), a PMU error
//! model ([`measurement`]), a CART tree ([`classifier`]), DULR-type PMU
//! placement ([`placement`]) and the experiment harness ([`experiment`]).

pub mod classifier;
pub mod dynamics_sim;
pub mod error;
pub mod experiment;
pub mod features;
pub mod grid_model;
pub mod measurement;
pub mod placement;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
pub use grid_model::{BusId, NetworkModel};
