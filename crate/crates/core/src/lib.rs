//! Decentralized clustered federated learning.
//!
//! `N` clients sit on a sparse communication graph and jointly learn `k`
//! cluster-specific models. Every round each client picks the model with the
//! lowest loss on its data, trains that model locally, and merges the models
//! its neighbors trained into its own copies, either synchronously (batch
//! mean) or as a running average in arrival order.
//!
//! The crate is organised bottom-up:
//!
//! * [`topology`]: random graphs, mixing matrices and their spectral gap.
//! * [`datagen`]: rotated synthetic datasets and IDX ingestion.
//! * [`model`]: a one-hidden-layer MLP with softmax cross-entropy and SGD.
//! * [`dfca`]: client state, cluster assignment, local update and aggregation.
//! * [`baselines`]: centralized IFCA and single-model decentralized averaging.
//! * [`metrics`]: loss hierarchy, dispersion, clustering and test accuracy.
//! * [`config`], [`experiment`], [`harness`]: experiment configs, the outer
//!   training loop, and the run/sweep/verify drivers used by the CLI.

pub mod baselines;
pub mod config;
pub mod datagen;
pub mod dfca;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod topology;

pub use config::{Algorithm, ExperimentConfig};
pub use datagen::{Dataset, SyntheticSpec};
pub use dfca::{AggregationMode, ClientState, Hyperparams, InitMode, RoundPlan};
pub use error::{Error, Result};
pub use metrics::RoundMetrics;
pub use model::{FlatParams, MlpModel, ModelShape};
pub use topology::{MixingKind, MixingMatrix, Topology};
