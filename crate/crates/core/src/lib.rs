//! MQTT 3.1.1 broker with an operator syntax for in-broker filtering,
//! temporal and spatial aggregation and payload processing.

pub mod broker;
pub mod client;
pub mod clock;
pub mod codec;
pub mod config;
pub mod grammar;
pub mod logging;
pub mod pipeline;
pub mod processing;
pub mod rules;
pub mod server;
pub mod spatial;
pub mod store;
pub mod topic;
pub mod ttl;
