//! Shape control of tendon-driven continuum robots with Koopman models.
//!
//! The pipeline: simulate a multi-segment Kirchhoff rod ([`rod`]), collect
//! ramp-and-hold trajectories ([`datagen`]), lift backbone samples into
//! per-segment, time-delayed observables ([`lifting`]), identify a
//! control-affine linear model ([`koopman`]), and close the loop with a
//! condensed linear MPC ([`mpc`]) on top of an ADMM QP solver ([`qp`]).
//! [`eval`] reproduces the model-accuracy and closed-loop studies.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod frame;
pub mod koopman;
pub mod lifting;
pub mod mpc;
pub mod qp;
pub mod rod;

pub use error::{Error, Result};
pub use frame::SegmentFrame;
pub use datagen::{RampHoldSchedule, TrajectoryDataset};
pub use koopman::KoopmanModel;
pub use lifting::{InputMode, LiftingSpec};
pub use rod::{RobotConfig, RodModel, RodState, Simulator, TendonTension};
