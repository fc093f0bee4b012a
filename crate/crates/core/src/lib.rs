//! Federated learning simulator for flow-based intrusion detection.
//!
//! Participants each hold a shard of a flow dataset and train a small MLP
//! locally; a server aggregates their models round by round. Two drivers
//! choose what each round does:
//!
//! * [`federation::run_fedavg`]: random participant subset, fixed number of
//!   local updates, decaying learning rate.
//! * [`fedsa::run_fedsa`]: simulated annealing over the number of local
//!   updates, the learning rate and the participant subset.
//!
//! [`centralized::run_centralized`] trains on the pooled data for comparison
//! and [`experiment`] wires everything to config files and run directories.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which the experiment runner uses by default.

pub mod centralized;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod fedsa;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ParameterVector = nn::ParameterVector<f64>;
pub type Batch = nn::Batch<f64>;
pub type Dataset = data::Dataset<f64>;
pub type Shard = data::Shard<f64>;
pub type Federation = federation::Federation<f64>;

pub type ParameterVector32 = nn::ParameterVector<f32>;
pub type Batch32 = nn::Batch<f32>;
pub type Dataset32 = data::Dataset<f32>;
pub type Federation32 = federation::Federation<f32>;
