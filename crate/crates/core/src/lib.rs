//! Flow-matching laboratory.
//!
//! Trains flow-matching vector fields on 2-D synthetic densities, fine-tunes
//! them by maximum likelihood through unrolled ODE solves, attaches
//! ControlSynth residual fields with ISS and contraction certificates, and
//! checks discretization error bounds against analytic flows.

pub mod assignment;
pub mod autodiff;
pub mod cli;
pub mod bounds;
pub mod checkpoint;
pub mod config;
pub mod coupling;
pub mod datasets;
pub mod error;
pub mod fields;
pub mod finetune;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod solvers;
pub mod stability;
pub mod train;

pub use error::{Error, Result};
