//! The algorithm catalog and its registry.
//!
//! Four algorithms span the override surface: fedavg (pure protocol
//! defaults), fedprox (client objective change), scaffold (stateful
//! client/server exchange of extra tensors), and fedopt (server-side
//! optimizer, with momentum giving FedAvgM).

pub mod fedavg;
pub mod fedopt;
pub mod fedprox;
pub mod registry;
pub mod scaffold;

pub use registry::{AlgorithmDescriptor, Registry, ResolvedAlgorithm};
