//! Discrete-event simulator of a swarm of drone-mounted single-board
//! micro-cloud servers.
//!
//! The crate is organised bottom-up:
//!
//! * [`engine`] and [`rng`]: virtual clock, event queue, seeded streams.
//! * [`node`]: CPU, memory, battery and flight policy of one drone.
//! * [`radio`]: directional RSSI model, link table, MPR selection, flooding.
//! * [`swarm`]: discovery list, spread/bin-pack placement, failover.
//! * [`container`]: container footprints and creation-time model.
//! * [`workload`]: closed-loop stress test on a processor-sharing CPU.
//! * [`scenario`], [`world`], [`report`]: scenario files, the full
//!   simulation and its on-disk outputs.

pub mod container;
pub mod engine;
pub mod node;
pub mod radio;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod swarm;
pub mod workload;
pub mod world;

pub use engine::{EventId, EventQueue, Model, SimEngine, SimError};
pub use node::{NodeId, PiNodeModel};

pub use report::SimReport;
pub use scenario::{parse_scenario, Scenario};
pub use world::simulate;
