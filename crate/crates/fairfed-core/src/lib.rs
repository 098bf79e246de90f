//! Deterministic federated learning simulator with fairness-aware
//! aggregation (FairFed) and reweighing/FairBatch baselines.

pub mod debias;
pub mod fed;
pub mod harness;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod report;
pub mod rng;
pub mod secagg;
