//! Uncertainty-aware routing from higher-order calibrated predictors.
//!
//! A weak model's expected loss at each input splits into an irreducible part (the entropy of
//! the true label distribution) and a reducible part (what an oracle would recover). Calibrating
//! the weak model on k-snapshot data, i.e. inputs with several independent labels each, yields
//! per-bin estimates of both parts for any bounded proper loss. Those estimates drive
//! predict / route / abstain decisions without recalibration when the loss or the penalties
//! change.

pub mod baselines;
pub mod calibrator;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod partition;
pub mod router;
pub mod selftest;
pub mod synthetic;
pub mod types;

pub use calibrator::{CalibratedRouterModel, Decomposition, MixtureEntry, TaggedMixture};
pub use error::{Error, Result};
pub use losses::LossSpec;
pub use partition::{BinId, PartitionKind, PartitionSpec};
pub use router::{decide, simulated_costs, tree_decide, OracleSpec, Router};
pub use types::{Action, LabelDistribution, RoutingConfig, RoutingDecision, SnapshotExample};
