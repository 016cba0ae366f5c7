//! Discrete-event simulator for adaptive routing on n-dimensional tori.
//!
//! The crate models credit-flow-controlled store-and-forward routers and
//! compares three adaptive policies (bubble-adaptive minimal routing and two
//! deroute-through-intermediate-node variants) under synthetic traffic.

pub mod config;
pub mod engine;
pub mod harness;
pub mod idn;
pub mod policy;
pub mod router;
pub mod topology;
pub mod traffic;

pub use config::{ConfigError, SimConfig, Timing};
pub use policy::RoutePolicy;
pub use topology::{Coord, TorusShape};
pub use traffic::TrafficPattern;
