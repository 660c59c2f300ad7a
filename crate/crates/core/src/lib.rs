//! Packet-level discrete-event simulator for flowcut switching.
//!
//! A flowcut is a run of consecutive packets of one flow that all take the
//! same path. Switches pick a new path only once every packet of the current
//! flowcut has been acknowledged by the egress switch, and they may pause a
//! source until that happens when the path's RTT grows. This crate models
//! that mechanism together with the usual baselines (ECMP, packet spraying,
//! flowlets, flowcells, UGAL and Valiant) on fat-tree and Dragonfly fabrics
//! with credit-based, lossless links.

pub mod analytics;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod host;
pub mod metrics;
pub mod packet;
pub mod routing;
pub mod sim;
pub mod switch;
pub mod time;
pub mod topology;
pub mod trace;
pub mod workload;

pub use error::{ConfigError, Error, SimError};
pub use time::SimTime;
