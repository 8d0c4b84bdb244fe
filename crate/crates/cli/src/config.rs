//! TOML run configuration with strict key checking.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use nonlocal_core::attractor::PerturbationFamily;
use nonlocal_core::{
    AssemblyOptions, DecaySpec, Error, GainFamily, Grid, IntegratorConfig, KernelFamily,
    KernelSpec, ModelBuilder, ModelSpec, Normalization, ReactionFamily, Scheme,
};

/// A single problem in a configuration, located by its dotted key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl ConfigErrors {
    pub fn paths(&self) -> Vec<&str> {
        self.0.iter().map(|e| e.path.as_str()).collect()
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl From<ConfigErrors> for Error {
    fn from(e: ConfigErrors) -> Self {
        Error::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub grid: GridSection,
    pub kernel: KernelSection,
    pub model: ModelSection,
    pub integrator: IntegratorSection,
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dimension: usize,
    pub bounds: Vec<[f64; 2]>,
    pub nodes_per_axis: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelName {
    Uniform,
    TruncatedGaussian,
    Tent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub family: KernelName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Support radius; for the Gaussian it defaults to `4 sigma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub renormalize_rows: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Norm exponents; the first one drives every check.
    #[serde(default = "default_p")]
    pub p: Vec<f64>,
    pub delta: f64,
    #[serde(default = "one")]
    pub mu: f64,
    #[serde(default)]
    pub gradient_diagnostics: bool,
    pub decay: DecaySpec,
    pub reaction: ReactionSection,
    pub gain: GainSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReactionName {
    Zero,
    SaturatedAffine,
    LinearSaturated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactionSection {
    pub family: ReactionName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub beta_wave: f64,
    pub k_f: f64,
    pub c_f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainName {
    Zero,
    Linear,
    ScaledTanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSection {
    pub family: GainName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    pub k_g: f64,
    pub c_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    #[serde(default)]
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "one_usize")]
    pub record_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Validate,
    Simulate,
    Absorb,
    Attractor,
    Continuity,
}

impl ExperimentName {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Validate => "validate",
            ExperimentName::Simulate => "simulate",
            ExperimentName::Absorb => "absorb",
            ExperimentName::Attractor => "attractor",
            ExperimentName::Continuity => "continuity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: ExperimentName,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    /// Norm of random initial fields as a multiple of the absorbing radius.
    #[serde(default = "default_initial_radius")]
    pub initial_radius: f64,
    #[serde(default)]
    pub smooth_initial: bool,
    /// Defaults to twice the absorbing bound plus `10 / ε`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
    #[serde(default = "one")]
    pub spacing: f64,
    #[serde(default = "default_snapshots")]
    pub snapshots_per_member: usize,
    #[serde(default = "default_perturbation")]
    pub perturbation: PerturbationFamily,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    /// Allowed increase between consecutive semidistances, as a multiple of the absorbing radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Bound on the last semidistance, as a multiple of the absorbing radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_threshold: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_p() -> Vec<f64> {
    vec![2.0]
}

fn default_ensemble() -> usize {
    8
}

fn default_initial_radius() -> f64 {
    10.0
}

fn default_snapshots() -> usize {
    4
}

fn default_perturbation() -> PerturbationFamily {
    PerturbationFamily::WidthScaling
}

fn default_levels() -> Vec<f64> {
    (0..7).map(|k| 0.5f64.powi(k)).collect()
}

/// Parses and range-checks a configuration; every problem carries its key path.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    let de = toml::Deserializer::parse(text).map_err(|e| {
        ConfigErrors(vec![ConfigError {
            path: "<document>".into(),
            message: e.message().to_string(),
        }])
    })?;
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ConfigErrors(vec![ConfigError {
            path: if path == "." {
                "<document>".into()
            } else {
                path
            },
            message: inner.message().to_string(),
        }])
    })?;
    config.check()?;
    Ok(config)
}

struct Checker(Vec<ConfigError>);

impl Checker {
    fn fail(&mut self, path: &str, message: impl Into<String>) {
        self.0.push(ConfigError {
            path: path.into(),
            message: message.into(),
        });
    }

    fn positive(&mut self, path: &str, v: f64) {
        if !(v.is_finite() && v > 0.0) {
            self.fail(path, format!("must be positive and finite, got {v}"));
        }
    }

    fn nonnegative(&mut self, path: &str, v: f64) {
        if !(v.is_finite() && v >= 0.0) {
            self.fail(path, format!("must be nonnegative and finite, got {v}"));
        }
    }

    fn finite(&mut self, path: &str, v: f64) {
        if !v.is_finite() {
            self.fail(path, format!("must be finite, got {v}"));
        }
    }

    fn required(&mut self, path: &str, v: Option<f64>, family: &str) -> f64 {
        match v {
            Some(v) => {
                self.finite(path, v);
                v
            }
            None => {
                self.fail(path, format!("required by family {family}"));
                0.0
            }
        }
    }

    fn unused(&mut self, path: &str, v: Option<f64>, family: &str) {
        if v.is_some() {
            self.fail(path, format!("not used by family {family}"));
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    /// Range and consistency checks beyond what the schema enforces.
    pub fn check(&self) -> Result<(), ConfigErrors> {
        let mut c = Checker(Vec::new());
        let g = &self.grid;
        if !(1..=2).contains(&g.dimension) {
            c.fail(
                "grid.dimension",
                format!("must be 1 or 2, got {}", g.dimension),
            );
        } else if g.bounds.len() != g.dimension {
            c.fail(
                "grid.bounds",
                format!("expected {} intervals, got {}", g.dimension, g.bounds.len()),
            );
        }
        for (i, [a, b]) in g.bounds.iter().enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                c.fail(
                    &format!("grid.bounds[{i}]"),
                    format!("need a < b, got [{a}, {b}]"),
                );
            }
        }
        if g.nodes_per_axis < 2 {
            c.fail("grid.nodes_per_axis", "must be at least 2");
        }

        self.kernel_spec_checked(&mut c);

        let m = &self.model;
        if m.p.is_empty() {
            c.fail("model.p", "at least one exponent is required");
        }
        for (i, &p) in m.p.iter().enumerate() {
            if !(p.is_finite() && p >= 1.0) {
                c.fail(
                    &format!("model.p[{i}]"),
                    format!("must be finite and at least 1, got {p}"),
                );
            }
        }
        c.positive("model.delta", m.delta);
        c.positive("model.mu", m.mu);
        match m.decay {
            DecaySpec::Constant { h0 } => c.positive("model.decay.h0", h0),
            DecaySpec::Affine { h0, h1 } => {
                c.positive("model.decay.h0", h0);
                c.nonnegative("model.decay.h1", h1);
            }
        }
        self.reaction_checked(&mut c);
        self.gain_checked(&mut c);

        let i = &self.integrator;
        c.positive("integrator.dt", i.dt);
        c.nonnegative("integrator.t_end", i.t_end);
        if i.dt > 0.0 && i.t_end > 0.0 && i.dt > i.t_end {
            c.fail("integrator.dt", format!("exceeds t_end = {}", i.t_end));
        }
        if i.record_every == 0 {
            c.fail("integrator.record_every", "must be at least 1");
        }
        if i.snapshot_every == Some(0) {
            c.fail("integrator.snapshot_every", "must be at least 1");
        }

        let e = &self.experiment;
        if e.ensemble_size == 0 {
            c.fail("experiment.ensemble_size", "must be at least 1");
        }
        c.nonnegative("experiment.initial_radius", e.initial_radius);
        if let Some(b) = e.burn_in {
            c.nonnegative("experiment.burn_in", b);
        }
        c.positive("experiment.spacing", e.spacing);
        if e.snapshots_per_member == 0 {
            c.fail("experiment.snapshots_per_member", "must be at least 1");
        }
        for (k, &l) in e.levels.iter().enumerate() {
            c.nonnegative(&format!("experiment.levels[{k}]"), l);
        }
        if e.name == ExperimentName::Continuity && e.levels.len() < 3 {
            c.fail("experiment.levels", "continuity needs at least 3 levels");
        }
        if let Some(t) = e.tolerance {
            c.nonnegative("experiment.tolerance", t);
        }
        if let Some(t) = e.final_threshold {
            c.nonnegative("experiment.final_threshold", t);
        }
        if let PerturbationFamily::Bump { center, width } = &e.perturbation {
            if center.len() != g.dimension {
                c.fail(
                    "experiment.perturbation.center",
                    "length must match grid.dimension",
                );
            }
            c.positive("experiment.perturbation.width", *width);
        }

        if c.0.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(c.0))
        }
    }

    fn kernel_spec_checked(&self, c: &mut Checker) -> KernelSpec {
        let k = &self.kernel;
        let family = match k.family {
            KernelName::Uniform => {
                c.unused("kernel.sigma", k.sigma, "uniform");
                c.unused("kernel.radius", k.radius, "uniform");
                KernelFamily::Uniform
            }
            KernelName::Tent => {
                c.unused("kernel.sigma", k.sigma, "tent");
                let radius = c.required("kernel.radius", k.radius, "tent");
                if k.radius.is_some() {
                    c.positive("kernel.radius", radius);
                }
                KernelFamily::Tent { radius }
            }
            KernelName::TruncatedGaussian => {
                let sigma = c.required("kernel.sigma", k.sigma, "truncated_gaussian");
                let radius = k.radius.unwrap_or(4.0 * sigma);
                if k.sigma.is_some() {
                    c.positive("kernel.sigma", sigma);
                    c.positive("kernel.radius", radius);
                }
                KernelFamily::TruncatedGaussian { sigma, radius }
            }
        };
        c.positive("kernel.scale", k.scale);
        KernelSpec::new(family)
            .with_normalization(k.normalization)
            .with_scale(k.scale)
    }

    fn reaction_checked(&self, c: &mut Checker) -> ReactionFamily {
        let r = &self.model.reaction;
        c.finite("model.reaction.beta", r.beta);
        c.finite("model.reaction.beta_wave", r.beta_wave);
        c.finite("model.reaction.k_f", r.k_f);
        c.finite("model.reaction.c_f", r.c_f);
        match r.family {
            ReactionName::Zero => {
                c.unused("model.reaction.alpha", r.alpha, "zero");
                c.unused("model.reaction.a", r.a, "zero");
                if r.beta != 0.0 || r.beta_wave != 0.0 {
                    c.fail("model.reaction.beta", "not used by family zero");
                }
                ReactionFamily::Zero
            }
            ReactionName::SaturatedAffine => {
                c.unused("model.reaction.a", r.a, "saturated_affine");
                ReactionFamily::SaturatedAffine {
                    alpha: c.required("model.reaction.alpha", r.alpha, "saturated_affine"),
                    beta: r.beta,
                    beta_wave: r.beta_wave,
                }
            }
            ReactionName::LinearSaturated => {
                c.unused("model.reaction.alpha", r.alpha, "linear_saturated");
                ReactionFamily::LinearSaturated {
                    a: c.required("model.reaction.a", r.a, "linear_saturated"),
                    beta: r.beta,
                    beta_wave: r.beta_wave,
                }
            }
        }
    }

    fn gain_checked(&self, c: &mut Checker) -> GainFamily {
        let g = &self.model.gain;
        c.finite("model.gain.k_g", g.k_g);
        c.finite("model.gain.c_g", g.c_g);
        match g.family {
            GainName::Zero => {
                c.unused("model.gain.gamma", g.gamma, "zero");
                c.unused("model.gain.a", g.a, "zero");
                c.unused("model.gain.b", g.b, "zero");
                GainFamily::Zero
            }
            GainName::Linear => {
                c.unused("model.gain.a", g.a, "linear");
                c.unused("model.gain.b", g.b, "linear");
                GainFamily::Linear {
                    gamma: c.required("model.gain.gamma", g.gamma, "linear"),
                }
            }
            GainName::ScaledTanh => {
                c.unused("model.gain.gamma", g.gamma, "scaled_tanh");
                GainFamily::ScaledTanh {
                    a: c.required("model.gain.a", g.a, "scaled_tanh"),
                    b: c.required("model.gain.b", g.b, "scaled_tanh"),
                }
            }
        }
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        self.kernel_spec_checked(&mut Checker(Vec::new()))
    }

    pub fn assembly_options(&self) -> AssemblyOptions {
        AssemblyOptions {
            with_derivatives: self.model.gradient_diagnostics,
            renormalize_rows: self.kernel.renormalize_rows,
            ..AssemblyOptions::default()
        }
    }

    pub fn build_grid(&self) -> nonlocal_core::Result<Arc<Grid>> {
        let bounds: Vec<(f64, f64)> = self.grid.bounds.iter().map(|[a, b]| (*a, *b)).collect();
        Ok(Arc::new(Grid::new(
            self.grid.dimension,
            &bounds,
            self.grid.nodes_per_axis,
        )?))
    }

    /// Assembles the model without checking its hypotheses.
    pub fn build_model(&self) -> nonlocal_core::Result<ModelSpec> {
        let mut c = Checker(Vec::new());
        let reaction = self.reaction_checked(&mut c);
        let gain = self.gain_checked(&mut c);
        let m = &self.model;
        ModelBuilder::new(self.build_grid()?)
            .decay(m.decay)
            .reaction(reaction, m.reaction.k_f, m.reaction.c_f)
            .gain(gain, m.gain.k_g, m.gain.c_g)
            .kernel_with(self.kernel_spec(), self.assembly_options())
            .p(m.p[0])
            .delta(m.delta)
            .mu(m.mu)
            .gradient_diagnostics(m.gradient_diagnostics)
            .build()
    }

    pub fn integrator_config(&self) -> IntegratorConfig {
        let i = &self.integrator;
        IntegratorConfig {
            scheme: i.scheme,
            dt: i.dt,
            t_end: i.t_end,
            record_every: i.record_every,
            snapshot_every: i.snapshot_every,
            exponents: self.model.p.clone(),
            record_gradients: self.model.gradient_diagnostics,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
seed = 7
output_dir = "out"

[grid]
dimension = 1
bounds = [[0.0, 1.0]]
nodes_per_axis = 64

[kernel]
family = "tent"
radius = 0.2

[model]
delta = 1.0

[model.decay]
family = "constant"
h0 = 1.0

[model.reaction]
family = "saturated_affine"
alpha = 0.2
beta = 0.1
k_f = 0.2
c_f = 0.4

[model.gain]
family = "scaled_tanh"
a = 0.4
b = 1.0
k_g = 0.4
c_g = 0.4

[integrator]
dt = 0.01
t_end = 1.0

[experiment]
name = "validate"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.model.p, vec![2.0]);
        assert_eq!(c.model.mu, 1.0);
        assert_eq!(c.kernel.normalization, Normalization::Global);
        assert_eq!(c.integrator.scheme, Scheme::Etd);
        assert_eq!(c.integrator.record_every, 1);
        assert_eq!(c.experiment.levels.len(), 7);
        assert_eq!(c.experiment.perturbation, PerturbationFamily::WidthScaling);
        c.build_model().unwrap().validate().unwrap();
    }

    #[test]
    fn zero_step_is_reported_at_its_key() {
        let text = MINIMAL.replace("dt = 0.01", "dt = 0.0");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.paths(), vec!["integrator.dt"]);
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let text = MINIMAL.replace("alpha = 0.2", "alpha = 0.2\nalhpa = 0.3");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.paths(), vec!["model.reaction.alhpa"]);
        let text = format!("{MINIMAL}\n[extra]\nx = 1\n");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn missing_sections_and_keys() {
        let text = MINIMAL.replace("[experiment]\nname = \"validate\"\n", "");
        assert!(parse_config(&text).is_err());
        let text = MINIMAL.replace("k_g = 0.4\n", "");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.paths(), vec!["model.gain"]);
        assert!(err.to_string().contains("k_g"));
    }

    #[test]
    fn family_parameters_are_checked() {
        let text = MINIMAL.replace("radius = 0.2", "sigma = 0.2");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.paths(), vec!["kernel.sigma", "kernel.radius"]);
        let text = MINIMAL.replace("a = 0.4\nb = 1.0", "gamma = 0.4");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(
            err.paths(),
            vec!["model.gain.gamma", "model.gain.a", "model.gain.b"]
        );
    }

    #[test]
    fn several_range_errors_are_collected() {
        let text = MINIMAL
            .replace("nodes_per_axis = 64", "nodes_per_axis = 1")
            .replace("delta = 1.0", "delta = -1.0")
            .replace("t_end = 1.0", "t_end = 1.0\nrecord_every = 0");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(
            err.paths(),
            vec![
                "grid.nodes_per_axis",
                "model.delta",
                "integrator.record_every"
            ]
        );
    }

    #[test]
    fn dominance_failure_surfaces_downstream() {
        let text = MINIMAL.replace("k_f = 0.2", "k_f = 0.7");
        let c = parse_config(&text).unwrap();
        match c.build_model().unwrap().validate() {
            Err(Error::Hypothesis { inequality, .. }) => assert_eq!(inequality, "k_f + k_g < h_0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn serialization_round_trips() {
        let mut c = parse_config(MINIMAL).unwrap();
        c.experiment.perturbation = PerturbationFamily::Bump {
            center: vec![0.5],
            width: 0.1,
        };
        c.experiment.burn_in = Some(12.5);
        c.integrator.snapshot_every = Some(3);
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
    }
}
