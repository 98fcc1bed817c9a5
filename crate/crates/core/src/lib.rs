//! Supervisory runtime for redundant autonomous-racing driver pipelines.
//!
//! Several independent control pipelines run in parallel and publish
//! normalized control proposals with a confidence model. The supervisor
//! monitors their health, arbitrates with a safety gate and a clutch for
//! smooth hand-over, and closes the loop against a kinematic race-car
//! simulator.

pub mod bus;
pub mod adapter;
pub mod model;
pub mod sim;
pub mod estimator;
pub mod pipelines;
pub mod decision;
pub mod handlers;
pub mod hmi;
pub mod runtime;
pub mod supervisor;
