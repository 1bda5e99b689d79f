//! Offline deep reinforcement learning for hemodynamic management, built to be
//! checked against ground truth.
//!
//! The pipeline runs simulator (or ingested) event logs through time
//! rebinning, recurrent history embedding, reward construction and a dueling
//! double DQN with prioritized replay, then evaluates the learned policies by
//! weighted doubly robust estimation and by their action distributions. The
//! [`harness`] sweeps the implementation axes (treatment history, bin
//! duration, reward horizon, embedding architecture, random restarts).
//!
//! Data-parallel loops (patients, bootstrap replicates, grid cells) go through
//! [`par`], which uses rayon when the `parallel` feature is enabled and plain
//! iterators otherwise. Results never depend on scheduling order.

pub mod agent;
pub mod cohort;
pub mod discretize;
pub mod embed;
pub mod harness;
pub mod metrics;
pub mod nnkit;
pub mod numeric;
pub mod ope;
pub mod par;
pub mod reward;
pub mod seed;

/// Number of discrete treatment levels per drug (no treatment + 4 quartiles).
pub const DOSE_BINS: usize = 5;
/// Size of the joint IV-fluid x vasopressor action space.
pub const N_ACTIONS: usize = DOSE_BINS * DOSE_BINS;
