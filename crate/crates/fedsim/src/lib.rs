//! A deterministic, single-process simulator of synchronous centralized
//! federated learning: a metered communication channel, the base
//! server/client round protocol, non-IID data partitioning, pluggable
//! aggregation algorithms, per-round evaluation, and a config-driven CLI.

pub mod algorithms;
pub mod comm;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod protocol;
pub mod rng;
pub mod runner;
pub mod templates;

pub use error::{Error, Result};
