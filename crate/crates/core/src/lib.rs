//! Simulation library for learning-based automated demand response:
//! customer price-response models, the aggregator's estimation and
//! incentive-design loop, data-poisoning attacks against that loop,
//! Shapley-style valuation of events and customers, and a single-machine
//! frequency surrogate for the grid-side consequences.

pub mod error;
pub mod model;
pub mod learner;
pub mod incentive;
pub mod attack;
pub mod valuation;
pub mod gridfreq;
pub mod scenario;

pub use error::{Error, Result};
pub use model::{
    clip_to_capacity, round_sig9, AlphaParams, BetaParams, CustomerId, CustomerTruth,
    DREventRecord,
};
