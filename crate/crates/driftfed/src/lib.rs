//! Drift-aware federated malware detection, simulated.
//!
//! The crate has three layers:
//!
//! * **Method** ([`flame`], [`detectors`], [`model`]): KS-based
//!   confidence monitoring with a static or adaptive threshold,
//!   stability-gated training, concept-retention sampling, and the
//!   streaming baseline detectors (ADWIN, Page-Hinkley, KSWIN).
//! * **Simulation** ([`stream`], [`federation`]): a deterministic
//!   discrete-time model of a server / clients / endpoints deployment
//!   over a synthetic malware feature stream with scheduled concept
//!   drift, plus a byte ledger of every transfer.
//! * **Experiment plumbing** ([`config`], [`report`], [`calibrate`]):
//!   versioned JSON configs, report/CSV writers, strategy comparison,
//!   and detector calibration.
//!
//! # Determinism
//!
//! Every random draw comes from a ChaCha8 stream seeded through
//! [`seed::derive`], which hashes `(root_seed, tag, indices)` into an
//! independent stream per purpose (`"client-data"`, `"endpoint-data"`,
//! `"model-init"`, `"train"`, `"split"`, `"retention"`, `"detector"`).
//! Two runs of the same config are bit-identical, and every strategy in
//! a config observes identical data streams.

// Negated comparisons like `!(x > 0.0)` are deliberate throughout the
// validation paths: unlike `x <= 0.0` they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod config;
pub mod detectors;
pub mod federation;
pub mod flame;
pub mod model;
pub mod report;
pub mod seed;
pub mod stream;

pub use config::{ExperimentConfig, StrategyKind};
pub use federation::{run_all, run_strategy, Simulation, SimulationReport};
