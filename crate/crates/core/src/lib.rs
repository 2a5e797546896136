//! Opportunistic scheduling of multiclass users over i.i.d. time-varying
//! channels: simulation, exact drifts, fluid limits, stability and fluid
//! control.

// negated comparisons are deliberate: NaN must fail validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod cli;
pub mod control;
pub mod drift;
pub mod fluid;
pub mod model;
pub mod output;
pub mod policy;
pub mod simulator;

pub use control::{optimal_control, OptimalControl};
pub use drift::{
    averaged_drift, serve_distribution, AveragedDrift, ClassLoad, SolverError, SolverOptions,
};
pub use fluid::{fluid_trajectory, FluidError, FluidTrajectory, StabilityReport};
pub use model::{ConfigError, SystemConfig};
pub use policy::{Policy, PolicyError, PolicySpec};

/// Top-level error with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Fluid(#[from] FluidError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// 2 for bad input, 1 for failures while computing or writing.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(ConfigError::Io { .. }) => 1,
            Error::Config(_) | Error::Policy(_) | Error::Usage(_) => 2,
            Error::Fluid(
                FluidError::BadInitial { .. } | FluidError::BadSweep(_) | FluidError::Policy(_),
            ) => 2,
            _ => 1,
        }
    }
}
