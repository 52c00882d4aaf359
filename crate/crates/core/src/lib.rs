//! Simulator and training harness for UAV data-harvesting trajectory design
//! in an IoT network.
//!
//! A UAV flies over a Manhattan-grid city on a fixed lattice, collects uplink
//! data from ground sensor nodes under a log-distance LoS/NLoS radio channel,
//! and learns a trajectory policy with deep Q-learning. The crate provides
//! three training pipelines:
//!
//! * `baseline`: classic deep Q-learning on real-world episodes only,
//! * `model-aided`: learns a radio map (channel network + node localization)
//!   from real measurements and trains the agent mostly in that learned world,
//! * `oracle`: the same loop with the true channel and node positions, an
//!   upper reference for the model-aided variant.
//!
//! All randomness flows from a single configuration seed through named
//! sub-streams ([`rng::substream`]), so every pipeline is bit-reproducible.

pub mod channel_model;
pub mod dqn;
pub mod env;
pub mod error;
pub mod geom;
pub mod localizer;
pub mod mlp;
pub mod radio;
pub mod rng;
pub mod scenario;
pub mod trainer;

pub use error::{Error, Result};
pub use geom::{GroundPoint, Point3};
pub use scenario::{Building, CityMap, MissionSpec, NodeSet, ScenarioConfig};
