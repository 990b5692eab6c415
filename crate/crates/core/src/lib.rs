//! Root-cause localization for availability incidents in microservice
//! systems.
//!
//! Starting from a service whose business metric went bad, the engine builds
//! a call graph from recent traffic, detects anomalous calls around the
//! service, follows anomaly propagation chains outward, and ranks the services
//! at the ends of those chains by how closely their metrics track the
//! business metric.

pub mod anomaly;
pub mod detection;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod models;
pub mod propagation;
pub mod ranking;
pub mod simulator;
pub mod stats;
pub mod store;

pub use anomaly::AnomalyType;
pub use engine::{localize, EngineConfig, Incident, Localization};
pub use error::{Error, Result};
