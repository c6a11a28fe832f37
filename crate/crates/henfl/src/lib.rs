//! Deterministic federated-learning privacy testbed.
//!
//! Two protection layers run once over the training data before any
//! federation: a lossless base-p block codec that packs each `n' x m'`
//! sub-block of digits into one integer (shrinking the element count by
//! the block size), followed by one-shot Gaussian noise calibrated as
//! `sigma² = Δf²/ε²` on the normalized result. Clients then train a small
//! convolutional network on the privacy-preserving shards and exchange
//! only averaged gradients with the simulated server, so the privacy spent
//! stays at `1·ε` regardless of round count.
//!
//! Modules, bottom up:
//!
//! * [`rng`] - seeded generator, derived streams, documented transforms;
//! * [`hensel`] - the exact block codec over digit matrices;
//! * [`dp`] - Gaussian mechanism and leakage accounting;
//! * [`data`] - IDX ingestion, quantization, the full pipeline, PGM dumps;
//! * [`nn`] - tensors, hand-derived backprop, SGD, checkpoints;
//! * [`fl`] - the client/server round protocol;
//! * [`config`] / [`experiment`] - the scenario grid and cell runner.

pub mod config;
pub mod data;
pub mod dp;
pub mod experiment;
pub mod fl;
pub mod hensel;
pub mod matrix;
pub mod nn;
pub mod rng;

pub use config::{DataRole, ExperimentConfig, Scenario, EPSILON_GRID};
pub use experiment::{run_grid, run_scenario, RunReport};
