//! Leader-following optimal coordination for nonlinear multi-agent systems
//! with tanh-basis (generalized fuzzy hyperbolic) critics.
//!
//! The crate covers the communication graph, agent dynamics, the critic,
//! online and policy-iteration learning, a deterministic RK4 simulator, and a
//! suite of numerical property checks.

pub mod config;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod gfhm;
pub mod graph;
pub mod simulator;
pub mod testkit;

pub use config::{load_scenario, to_config, ScenarioConfig};
pub use controller::{CostSpec, LearnerGains, ProbingSignal, ProbingTerm};
pub use dynamics::{AgentModel, Network, VectorField};
pub use error::{Error, Result};
pub use gfhm::GfhmCritic;
pub use graph::DiGraph;
pub use simulator::{run_online, Scenario, TrajectoryLog};
