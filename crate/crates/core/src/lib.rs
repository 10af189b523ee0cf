//! Maritime traffic analysis: AIS preprocessing, collision-risk kinematics,
//! anomaly synthesis, a multi-task forecasting model and briefing generation.

pub mod ais;
pub mod briefing;
pub mod error;
pub mod eval;
pub mod geo;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
