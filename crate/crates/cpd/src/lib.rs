//! Filtered variational integration for charged-particle dynamics in
//! moderately to strongly magnetized fields.
//!
//! The library provides the field-model abstraction, the matrix filters and
//! resonance checks, the filtered two-step variational integrator with its
//! Boris and adaptive reference baselines, conservation observables, and an
//! experiment harness that runs convergence sweeps and long-horizon
//! conservation studies and writes them out as CSV.

pub mod fields;
pub mod filters;
pub mod harness;
pub mod integrators;
pub mod linalg3;
pub mod observables;

pub use fields::{FieldError, FieldModel, FieldModelSpec};
pub use filters::{build_filters, check_resonance, FilterPack};
pub use integrators::{
    boris_run, fvi_run, reference_solve, IntegratorError, RunResult, SamplePolicy, SolverConfig,
};
pub use observables::{drift_series, sample_observables, DriftRecord, ObservableSample};
