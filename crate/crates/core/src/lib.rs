//! Hyperparameter tuning with successive halving, ASHA and Hyperband.
//!
//! The bracket logic in [`bracket`] is a pure state machine. [`orchestrator`]
//! runs several brackets as one experiment, [`tuner`] binds an experiment to a
//! write-ahead [`journal`], and [`scheduler`] shares a cluster between
//! experiments. [`sim`] drives all of it against a synthetic workload.

pub mod bracket;
pub mod client;
pub mod checkpoint;
pub mod export;
pub mod journal;
pub mod orchestrator;
pub mod scheduler;
pub mod seed;
pub mod serde_f64;
pub mod service;
pub mod sim;
pub mod space;
pub mod tuner;
