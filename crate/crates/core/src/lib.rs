//! Steady macroscopic drone-traffic fields in a 3D box with wind, obstacles
//! and a spherical target.
//!
//! A minimum-time value field (fast sweeping or a small neural network), the
//! induced ground velocity and a conservative finite-volume density are
//! coupled by an under-relaxed fixed-point loop. Numerical modules are generic
//! over [`Real`]; the aliases below fix the scalar to `f64`.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod fsm;
pub mod fundamental;
pub mod fvm;
pub mod grid;
pub mod picard;
pub mod pinn;
pub mod scalar;
pub mod source;
pub mod value;
pub mod vec3;
pub mod wind;

use thiserror::Error;

pub use config::{load_config, parse_config, validate_controllability, Backend, ConfigError, ScenarioConfig};
pub use diagnostics::{error_norms, ErrorNormReport, IoError, MetricsRow, RunMeta};
pub use grid::{CellClass, FieldKind, GeometryError, Units};
pub use picard::{run_picard, ScenarioError};
pub use pinn::PinnError;
pub use scalar::{Real, SENTINEL};
pub use source::SourceError;
pub use value::SolveStatus;

pub type Vec3 = vec3::Vec3<f64>;
pub type GridGeometry = grid::GridGeometry<f64>;
pub type GridField = grid::GridField<f64>;
pub type FundamentalDiagram = fundamental::FundamentalDiagram<f64>;
pub type WindModel = wind::WindModel<f64>;
pub type SourceField = source::SourceField<f64>;
pub type ValueSolution = value::ValueSolution<f64>;
pub type TransportSolution = fvm::TransportSolution<f64>;
pub type Scenario = picard::Scenario<f64>;
pub type PicardState = picard::PicardState<f64>;
pub type PicardOutcome = picard::PicardOutcome<f64>;

/// Any failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Pinn(#[from] PinnError),
    #[error(transparent)]
    Io(#[from] IoError),
}
