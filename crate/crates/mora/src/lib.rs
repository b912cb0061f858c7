//! Continual learning with self-activated, sparse mixtures of rank-1 adapters.
//!
//! A frozen base model is extended with pools of rank-1 units (a key row and a
//! value column per unit). Each task appends a fresh group of units and freezes
//! the previous ones. At inference the input's alignment with the keys decides
//! which units fire, so no task id or router network is needed. The crate also
//! ships the router-based and dense baselines used for comparison, a synthetic
//! class-incremental task generator, a small trainer, analysis tooling, and a
//! CLI around all of it.

pub mod adapter;
pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod gate;
pub mod numerics;
pub mod taskgen;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum MoraError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("softmax input has no finite entry")]
    AllMasked,
    #[error("budget k must be at least 1")]
    InvalidBudget,
    #[error("operation not defined for gate mode {0:?}")]
    WrongMode(gate::GateMode),
    #[error("task ids must grow monotonically: pool already holds task {last}, got {requested}")]
    NonMonotonicTask { last: usize, requested: usize },
    #[error("router required for mode {0:?} but none is attached")]
    MissingRouter(gate::GateMode),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("content hash mismatch for tensor {0}")]
    ChecksumMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MoraError>;
