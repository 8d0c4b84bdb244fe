//! Discretized nonlocal evolution equations with decay, reaction and kernel-coupled gain.

pub mod attractor;
pub mod error;
pub mod grid;
pub mod integrator;
pub mod kernel;
pub mod model;

pub use attractor::{
    absorbing_time, continuity_experiment, deviation_experiment, deviation_sweep,
    gradient_bound_check, hausdorff_semidistance, sample_attractor, AttractorSample,
    ContinuityParams, ContinuityReport, PerturbationFamily, SamplingParams,
};
pub use error::{Error, Result};
pub use grid::{Grid, LpSpace, StateField};
pub use integrator::{
    integrate, integrate_ensemble, random_field, IntegratorConfig, Scheme, Stepper,
    TrajectoryRecord,
};
pub use kernel::{
    AssemblyOptions, KernelFamily, KernelFunction, KernelMatrix, KernelSpec, Normalization,
};
pub use model::{
    DecaySpec, DerivedConstants, GainFamily, GainSpec, GradientConstants, ModelBuilder, ModelSpec,
    ReactionFamily, ReactionSpec, ValidationReport,
};

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
