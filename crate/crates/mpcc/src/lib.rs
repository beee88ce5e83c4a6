//! Trajectory planning for tractor-semitrailer vehicles with model predictive
//! contouring control (MPCC).
//!
//! The planner tracks three vehicle anchor points (tractor front axle, tractor
//! rear axle, semitrailer axle) along an arc-length-parameterized reference
//! path, each with its own progress state, and keeps all of them inside a
//! drivable corridor. The optimal control problem is transcribed with multiple
//! shooting and solved by a built-in interior-point method.

pub mod analysis;
pub mod error;
pub mod nlp;
pub mod ocp;
pub mod path;
pub mod scenario;
pub mod sim;
pub mod vehicle;

pub use error::Error;
