//! Simulated provider site: commander, drivers and their wire methods.

pub mod commander;
pub mod driver;

pub use commander::{Commander, DriverRegistration, DriverService, RemoteDriver};
pub use driver::{
    driver_transition, DeviceKind, DeviceState, Driver, DriverError, FaultProfile, Illegal, Latency, LogEntry,
    SimDriver, Verb,
};
