//! Tendon-driven Kirchhoff rod: configuration, statics, implicit dynamics and
//! backbone sampling.

pub mod config;
pub(crate) mod model;
pub mod sim;
pub mod so3;
pub mod state;
pub mod tendon;

pub use config::RobotConfig;
pub use model::{RodModel, ShootingSettings};
pub use sim::{dynamic_step, static_solve, static_solve_with, BdfCoefficients, Simulator, StepperState};
pub use state::{sample_backbone, BackboneSample, NodeState, RodState, TendonTension};
pub use tendon::{tendon_loads, PointWrench, TendonLoads};
