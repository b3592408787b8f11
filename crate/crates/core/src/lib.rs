//! Deterministic simulator for resource-aware clustered split-federated learning.

pub mod cli;
pub mod clustering;
pub mod config;
pub mod error;
pub mod orchestrator;
pub mod population;
pub mod predictor;
pub mod resources;
pub mod rng;
pub mod selector;
pub mod splitnn;
pub mod verify;

pub use error::{Error, Result};
