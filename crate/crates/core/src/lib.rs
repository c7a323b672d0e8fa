//! Passive nonlinear FIR operators: evaluation, constrained synthesis,
//! passivity verification, benchmark plants, VRFT data generation and
//! closed-loop simulation.

pub mod closedloop;
pub mod error;
pub mod operators;
pub mod passivity;
pub mod plants;
pub mod qp;
pub mod signals;
pub mod trainer;
pub mod vrft;

pub use error::{Error, Result};
