//! Broker-mediated account sharding: the protocol engine, a deterministic
//! discrete-event simulator, baselines, and shard-failure analysis.

pub mod digest;
pub mod ledger;
pub mod merkle;
pub mod msst;
pub mod partition;
pub mod broker;
pub mod shard;
pub mod security;
pub mod workload;
pub mod baselines;
pub mod metrics;
pub mod config;
pub mod sim;
