//! Finite-difference and Monte Carlo tools for parabolic SPDEs with dynamical
//! boundary conditions on periodically perforated domains, and for their
//! homogenized limit.
//!
//! The pipeline: build the perforated grid ([`geometry`]), solve the cell
//! problems for the effective tensor ([`cell`]), simulate micro paths
//! ([`micro`]) and macro paths ([`effective`]) under shared noise
//! ([`noise`], [`drift`]), then compare the laws of path functionals across
//! an epsilon ladder ([`experiment`]). [`config`] and [`output`] cover the
//! file formats.

// NaN must fail range checks, and index loops read better over small matrices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cell;
pub mod config;
pub mod drift;
pub mod effective;
pub mod experiment;
pub mod expr;
pub mod geometry;
pub mod linalg;
pub mod micro;
pub mod noise;
pub mod output;
pub mod path;

pub use cell::{compute_tensor, HomogenizedTensor, DEFAULT_CELL_TOL};
pub use config::{Config, ConfigError, TensorSource};
pub use drift::{DriftSpec, EffectiveForm, GradientCoefficient};
pub use effective::{MacroInitial, MacroSimulation};
pub use experiment::{
    run_sweep, wasserstein1, ComparisonReport, Coupling, ExperimentError, ExperimentPlan,
    LevelRecords, Model, SweepOutcome,
};
pub use expr::FieldExpr;
pub use geometry::{build_perforated_grid, CellField, CellSpec, NodalField, PerforatedGrid};
pub use linalg::SolverMethod;
pub use micro::MicroSimulation;
pub use noise::{NoiseId, SpectralNoiseSpec};
pub use output::{OutputDir, OutputError, RunManifest};
pub use path::{BoundaryInit, Functional, PathRecord, PathSettings, TimeGrid};
