//! Single-process federated learning simulator.
//!
//! The crate implements client-centric adaptation (FedCCA): every client
//! keeps a local model `theta` that takes part in aggregation and a private
//! client-specific model `phi` that never leaves the client. After each
//! round the server compares the final fully-connected layers of the `phi`
//! models, lets every client pick its own set of similar source clients and
//! forms that client's next `theta` as an attention-weighted mix of the
//! sources.
//!
//! FedAvg, FedProx and local-only training are provided as baselines, all on
//! top of the same small softmax/MLP classifier family in [`model`] and the
//! synthetic non-IID client generators in [`data`].
//!
//! Module map:
//!
//! * [`model`]: flat-parameter classifiers with analytic gradients.
//! * [`data`]: Gaussian-cluster pools, Dirichlet and pathological label
//!   partitions, rotation domain shift.
//! * [`protocol`]: distance, attention score, selection and aggregation.
//! * [`baselines`]: FedAvg, FedProx, local-only.
//! * [`orchestrator`]: round loop, seeding, parallel client phase.
//! * [`config`], [`output`], [`sweep`]: experiment configuration, result
//!   files and parameter sweeps.

pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod model;
pub mod orchestrator;
pub mod output;
pub mod protocol;
pub mod sweep;

pub use error::{Error, Result};
