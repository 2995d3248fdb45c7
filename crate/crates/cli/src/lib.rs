//! Command-line front end: data collection, staged training, evaluation,
//! racing and map export, each leaving a `manifest.json` next to its outputs.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

use thiserror::Error;

use surface_mbrl::dynamics::DynamicsError;
use surface_mbrl::eval::EvalError;
use surface_mbrl::gridmap::MapError;
use surface_mbrl::mapper::MapperError;
use surface_mbrl::planner::PlanError;
use surface_mbrl::sim::SimError;
use surface_mbrl::training::TrainError;

pub use commands::run;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    /// Process exit status: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::NonFinite => Self::Numerical(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::Spec(_) => Self::Usage(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<MapperError> for CliError {
    fn from(e: MapperError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<MapError> for CliError {
    fn from(e: MapError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Self::Numerical(e.to_string()),
            TrainError::Config(_) => Self::Usage(e.to_string()),
            TrainError::Dynamics(d) => d.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::TooManyInterventions { .. } => Self::Numerical(e.to_string()),
            PlanError::Sim(s) => s.into(),
            PlanError::Config(_) => Self::Usage(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NonFinite => Self::Numerical(e.to_string()),
            EvalError::Config(_) => Self::Usage(e.to_string()),
            EvalError::Plan(p) => p.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 1);
        assert_eq!(CliError::Data(String::new()).exit_code(), 2);
        assert_eq!(CliError::Numerical(String::new()).exit_code(), 3);
        let abort: CliError = PlanError::TooManyInterventions { interventions: 11, t: 3.0 }.into();
        assert_eq!(abort.exit_code(), 3);
        let diverged: CliError = TrainError::Diverged { stage: 1, epoch: 2, what: "loss" }.into();
        assert_eq!(diverged.exit_code(), 3);
        let empty: CliError = EvalError::EmptyData(30).into();
        assert_eq!(empty.exit_code(), 2);
    }
}
