//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use nonlocal_core::{
    random_field, DecaySpec, GainFamily, Grid, KernelSpec, ModelBuilder, ModelSpec, ReactionFamily,
    StateField,
};

/// Unit interval with `nodes` midpoints.
pub fn interval(nodes: usize) -> Arc<Grid> {
    Arc::new(Grid::interval(0.0, 1.0, nodes).expect("valid grid"))
}

/// Affine decay, saturating reaction and tanh gain with a tent kernel.
pub fn model(nodes: usize) -> ModelSpec {
    ModelBuilder::new(interval(nodes))
        .decay(DecaySpec::Affine { h0: 1.0, h1: 0.5 })
        .reaction(
            ReactionFamily::SaturatedAffine {
                alpha: 0.3,
                beta: 0.2,
                beta_wave: 0.05,
            },
            0.3,
            0.6,
        )
        .gain(GainFamily::ScaledTanh { a: 0.5, b: 1.5 }, 0.5, 0.75)
        .kernel(KernelSpec::tent(0.15))
        .build()
        .expect("valid model")
}

/// Random fields of the given norm, one per stream.
pub fn fields(model: &ModelSpec, count: u64, radius: f64) -> Vec<StateField> {
    (0..count)
        .map(|s| random_field(model.grid(), 1, s, radius, model.space, None).expect("field"))
        .collect()
}
