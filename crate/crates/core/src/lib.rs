//! Core of a federated testbed: experiment and resource models, discovery,
//! realization, materialization, commissioning, and the simulated site
//! components (commander, drivers, isolation edge) they coordinate with.

pub mod clock;
pub mod commissioning;
pub mod config;
pub mod discovery;
pub mod experiment;
pub mod hummingbird;
pub mod keys;
pub mod materialization;
pub mod realization;
pub mod rpc;
pub mod service;
pub mod site;
pub mod store;
pub mod xir;
