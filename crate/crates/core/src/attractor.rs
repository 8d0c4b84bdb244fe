//! Long-time behaviour: absorbing-ball entry, attractor sampling, Hausdorff
//! semidistances, kernel-perturbation experiments and the gradient bound.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{weighted_norm, Grid, LpSpace, StateField};
use crate::integrator::{
    integrate, random_field, IntegratorConfig, Scheme, Stepper, TrajectoryRecord,
};
use crate::kernel::{AssemblyOptions, KernelFunction, KernelMatrix, KernelSpec};
use crate::model::{LipschitzConstants, ModelSpec};

/// Relative slack on the absorbing radius when checking retained states.
pub const BALL_TOLERANCE: f64 = 1e-6;
/// Relative slack on the fitted deviation envelope.
pub const ENVELOPE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Absorption {
    pub initial_norm: f64,
    pub r_delta: f64,
    pub measured_entry_time: f64,
    pub analytic_bound: f64,
    pub record_interval: f64,
    /// Whether entry happened no later than the bound plus one record interval.
    pub within_bound: bool,
}

/// Measures when a trajectory from `u0` first records a norm inside the absorbing ball.
pub fn absorbing_time(
    model: &ModelSpec,
    u0: &StateField,
    config: &IntegratorConfig,
) -> Result<Absorption> {
    absorbing_trajectory(model, u0, config).map(|(a, _)| a)
}

/// [`absorbing_time`] together with the recorded trajectory.
pub fn absorbing_trajectory(
    model: &ModelSpec,
    u0: &StateField,
    config: &IntegratorConfig,
) -> Result<(Absorption, TrajectoryRecord)> {
    let constants = model.validate()?;
    let initial_norm = u0.lp_norm(model.space);
    if initial_norm <= constants.r_delta {
        return Err(Error::Usage(format!(
            "initial norm {initial_norm} is already inside the absorbing radius {}",
            constants.r_delta
        )));
    }
    let mut exponents = config.exponents.clone();
    exponents.retain(|&p| p != model.space.p());
    exponents.insert(0, model.space.p());
    let config = IntegratorConfig {
        exponents,
        ..config.clone()
    };
    let record = integrate(model, u0, &config)?;
    let entry = record
        .times
        .iter()
        .zip(&record.lp_norms)
        .find(|(_, n)| n[0] <= constants.r_delta)
        .map(|(t, _)| *t)
        .ok_or_else(|| {
            Error::Diagnostic(format!(
                "trajectory never entered the ball of radius {} by t = {}; final norm {}",
                constants.r_delta,
                config.t_end,
                record.final_norm(0)
            ))
        })?;
    let analytic_bound = constants.absorbing_time_bound(initial_norm);
    let record_interval = config.dt * config.record_every as f64;
    let absorption = Absorption {
        initial_norm,
        r_delta: constants.r_delta,
        measured_entry_time: entry,
        analytic_bound,
        record_interval,
        within_bound: entry <= analytic_bound + record_interval,
    };
    Ok((absorption, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub ensemble_size: usize,
    /// Norm of the random initial fields.
    pub initial_radius: f64,
    pub burn_in: f64,
    pub spacing: f64,
    pub snapshots_per_member: usize,
    pub seed: u64,
    pub dt: f64,
    pub scheme: Scheme,
}

/// Finite stand-in for the global attractor: spaced late-time snapshots of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct AttractorSample {
    pub kernel_id: String,
    pub states: Vec<StateField>,
    pub burn_in: f64,
    pub spacing: f64,
}

impl AttractorSample {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Largest norm among the retained states.
    pub fn max_norm(&self, space: LpSpace) -> f64 {
        self.states
            .iter()
            .map(|s| s.lp_norm(space))
            .fold(0.0, f64::max)
    }
}

/// Evolves `ensemble_size` random fields past the burn-in and keeps spaced snapshots.
/// Member `m` starts from stream `m` of `seed`, so equal seeds give common
/// initial data across models.
pub fn sample_attractor(model: &ModelSpec, params: &SamplingParams) -> Result<AttractorSample> {
    let constants = model.validate()?;
    if params.ensemble_size == 0 || params.snapshots_per_member == 0 {
        return Err(Error::Usage(
            "sampling needs at least one member and one snapshot".into(),
        ));
    }
    if !(params.spacing.is_finite() && params.spacing > 0.0) {
        return Err(Error::Usage(format!(
            "spacing must be positive, got {}",
            params.spacing
        )));
    }
    let required = 2.0 * constants.absorbing_time_bound(params.initial_radius);
    if params.burn_in.is_nan() || params.burn_in < required {
        return Err(Error::Usage(format!(
            "burn-in {} is shorter than twice the absorbing bound ({required})",
            params.burn_in
        )));
    }
    let limit = constants.r_delta * (1.0 + BALL_TOLERANCE);
    let members: Vec<Vec<StateField>> = (0..params.ensemble_size as u64)
        .into_par_iter()
        .map(|m| {
            let u0 = random_field(
                model.grid(),
                params.seed,
                m,
                params.initial_radius,
                model.space,
                None,
            )?;
            let mut stepper = Stepper::new(model, params.scheme, params.dt)?;
            let mut u = u0.into_values();
            stepper.advance(&mut u, params.burn_in)?;
            let mut kept = Vec::with_capacity(params.snapshots_per_member);
            for j in 0..params.snapshots_per_member {
                if j > 0 {
                    stepper.advance(&mut u, params.spacing)?;
                }
                let norm = weighted_norm(model.grid().weights(), &u, model.space.p());
                if norm > limit {
                    return Err(Error::Diagnostic(format!(
                        "member {m} has norm {norm} > {limit} after burn-in (snapshot {j})"
                    )));
                }
                kept.push(StateField::from_parts(Arc::clone(model.grid()), u.clone()));
            }
            Ok(kept)
        })
        .collect::<Result<_>>()?;
    Ok(AttractorSample {
        kernel_id: model.kernel.label().to_string(),
        states: members.into_iter().flatten().collect(),
        burn_in: params.burn_in,
        spacing: params.spacing,
    })
}

/// `max_{a∈A} min_{b∈B} ‖a − b‖_p`.
pub fn semidistance(a: &[StateField], b: &[StateField], space: LpSpace) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("semidistance of an empty sample".into()));
    }
    let grid = a[0].grid();
    if a.iter().chain(b).any(|s| !s.grid().same_as(grid)) {
        return Err(Error::Usage("samples live on different grids".into()));
    }
    let w = grid.weights();
    let mut diff = vec![0.0; grid.len()];
    Ok(a.iter()
        .map(|x| {
            b.iter()
                .map(|y| {
                    for ((d, x), y) in diff.iter_mut().zip(x.values()).zip(y.values()) {
                        *d = x - y;
                    }
                    weighted_norm(w, &diff, space.p())
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max))
}

/// One-sided Hausdorff semidistance from `a` to `b`.
pub fn hausdorff_semidistance(
    a: &AttractorSample,
    b: &AttractorSample,
    space: LpSpace,
) -> Result<f64> {
    semidistance(&a.states, &b.states, space)
}

/// `‖u_J(t) − u_{J₀}(t)‖_p` along twin trajectories from a common start.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationSeries {
    pub perturbation_size: f64,
    pub times: Vec<f64>,
    pub deviations: Vec<f64>,
    /// Largest sup-norm seen on either trajectory.
    pub sup_radius: f64,
}

impl DeviationSeries {
    pub fn max_deviation(&self) -> f64 {
        self.deviations.iter().copied().fold(0.0, f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,deviation")?;
        for (t, d) in self.times.iter().zip(&self.deviations) {
            writeln!(out, "{t:.16e},{d:.16e}")?;
        }
        Ok(())
    }
}

/// Runs the model and its copy driven by `perturbed` in lockstep from `u0`.
pub fn deviation_experiment(
    model: &ModelSpec,
    perturbed: Arc<KernelMatrix>,
    u0: &StateField,
    config: &IntegratorConfig,
) -> Result<DeviationSeries> {
    config.validate()?;
    model.check_field(u0)?;
    let twin = model.with_kernel(perturbed)?;
    let perturbation_size = model.kernel.l1_distance(&twin.kernel)?;
    let w = model.grid().weights();
    let p = model.space.p();
    let mut a = u0.values().to_vec();
    let mut b = a.clone();
    let mut diff = vec![0.0; a.len()];
    let mut sa = Stepper::new(model, config.scheme, config.dt)?;
    let mut sb = Stepper::new(&twin, config.scheme, config.dt)?;
    let start = weighted_norm(w, &a, f64::INFINITY);
    let mut series = DeviationSeries {
        perturbation_size,
        times: vec![0.0],
        deviations: vec![0.0],
        sup_radius: start,
    };
    let steps = config.step_count();
    for k in 1..=steps {
        let last = k == steps;
        let (dt, t) = if last {
            (config.t_end - (steps - 1) as f64 * config.dt, config.t_end)
        } else {
            (config.dt, k as f64 * config.dt)
        };
        sa.step_by(&mut a, dt)?;
        sb.step_by(&mut b, dt)?;
        series.sup_radius = series
            .sup_radius
            .max(weighted_norm(w, &a, f64::INFINITY))
            .max(weighted_norm(w, &b, f64::INFINITY));
        if last || k % config.record_every == 0 {
            for ((d, x), y) in diff.iter_mut().zip(&a).zip(&b) {
                *d = x - y;
            }
            series.times.push(t);
            series.deviations.push(weighted_norm(w, &diff, p));
        }
    }
    Ok(series)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeViolation {
    pub level: usize,
    pub time: f64,
    pub deviation: f64,
    pub envelope: f64,
}

/// Deviation series for several perturbed kernels against a fitted
/// `Ĉ₀ ‖J − J₀‖₁ e^{(L_g + L_f − h₀) t}` envelope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    pub perturbation_sizes: Vec<f64>,
    pub max_deviations: Vec<f64>,
    /// `max_t d(t) / ‖J − J₀‖₁`, zero for unperturbed levels.
    pub deviation_ratios: Vec<f64>,
    pub lipschitz: LipschitzConstants,
    /// `L_g + L_f − h₀`.
    pub envelope_rate: f64,
    pub c0_hat: f64,
    /// Index of the level the envelope constant was fitted on.
    pub fitted_level: Option<usize>,
    pub violations: Vec<EnvelopeViolation>,
    pub series: Vec<DeviationSeries>,
}

impl DeviationReport {
    /// Ratio of the largest to the smallest nonzero deviation ratio; 1 means exactly linear.
    pub fn linearity_spread(&self) -> f64 {
        let ratios: Vec<f64> = self
            .deviation_ratios
            .iter()
            .zip(&self.perturbation_sizes)
            .filter(|(_, &s)| s > 0.0)
            .map(|(r, _)| *r)
            .collect();
        let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        if ratios.is_empty() {
            1.0
        } else {
            hi / lo
        }
    }

    pub fn envelope_at(&self, size: f64, t: f64) -> f64 {
        self.c0_hat * size * (self.envelope_rate * t).exp()
    }

    pub fn check_envelope(&self) -> Result<()> {
        match self.violations.first() {
            None => Ok(()),
            Some(v) => Err(Error::Diagnostic(format!(
                "deviation envelope violated at level {} (t = {}): {} > {}",
                v.level, v.time, v.deviation, v.envelope
            ))),
        }
    }
}

/// Fits `Ĉ₀` on the smallest nonzero perturbation and checks every level against it.
///
/// Lipschitz constants are sampled on the sup-norm range actually visited
/// by the trajectories.
pub fn deviation_sweep(
    model: &ModelSpec,
    perturbed: &[Arc<KernelMatrix>],
    u0: &StateField,
    config: &IntegratorConfig,
) -> Result<DeviationReport> {
    let series: Vec<DeviationSeries> = perturbed
        .par_iter()
        .map(|k| deviation_experiment(model, Arc::clone(k), u0, config))
        .collect::<Result<_>>()?;
    let radius = series.iter().map(|s| s.sup_radius).fold(0.0, f64::max);
    let lipschitz = model.lipschitz_estimate(radius);
    let envelope_rate = lipschitz.gain + lipschitz.reaction - model.h0();

    let sizes: Vec<f64> = series.iter().map(|s| s.perturbation_size).collect();
    let fitted_level = sizes
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0)
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i);
    let c0_hat = fitted_level.map_or(0.0, |i| {
        let s = &series[i];
        s.times
            .iter()
            .zip(&s.deviations)
            .map(|(t, d)| d / (s.perturbation_size * (envelope_rate * t).exp()))
            .fold(0.0, f64::max)
    });

    let mut report = DeviationReport {
        max_deviations: series.iter().map(DeviationSeries::max_deviation).collect(),
        deviation_ratios: series
            .iter()
            .map(|s| {
                if s.perturbation_size > 0.0 {
                    s.max_deviation() / s.perturbation_size
                } else {
                    0.0
                }
            })
            .collect(),
        perturbation_sizes: sizes,
        lipschitz,
        envelope_rate,
        c0_hat,
        fitted_level,
        violations: Vec::new(),
        series: Vec::new(),
    };
    for (level, s) in series.iter().enumerate() {
        for (&t, &d) in s.times.iter().zip(&s.deviations) {
            let envelope = report.envelope_at(s.perturbation_size, t);
            if d > envelope * (1.0 + ENVELOPE_TOLERANCE) {
                report.violations.push(EnvelopeViolation {
                    level,
                    time: t,
                    deviation: d,
                    envelope,
                });
            }
        }
    }
    report.series = series;
    Ok(report)
}

/// How the base kernel is deformed at a given perturbation level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationFamily {
    /// Every length parameter multiplied by `1 + level`.
    WidthScaling,
    /// `(1 − level) J₀ + level J₁`.
    AmplitudeMix { other: KernelSpec },
    /// `J₀ + level · φ(x) φ(y)` with a Gaussian bump `φ` centred at `center`.
    Bump { center: Vec<f64>, width: f64 },
}

impl PerturbationFamily {
    pub fn kernel(
        &self,
        base: &KernelSpec,
        level: f64,
        grid: Arc<Grid>,
        options: AssemblyOptions,
    ) -> Result<KernelMatrix> {
        if !(level.is_finite() && level >= 0.0) {
            return Err(Error::Config(format!(
                "perturbation level must be nonnegative, got {level}"
            )));
        }
        match self {
            PerturbationFamily::WidthScaling => {
                let widened = base.widened(1.0 + level);
                if level > 0.0 && widened == *base {
                    return Err(Error::Config(format!(
                        "kernel {} has no width to scale",
                        base.label()
                    )));
                }
                KernelMatrix::assemble(&widened, grid, options)
            }
            PerturbationFamily::AmplitudeMix { other } => {
                other.validate()?;
                let mix = MixedKernel {
                    base: *base,
                    other: *other,
                    theta: level,
                };
                KernelMatrix::assemble(&mix, grid, options)
            }
            PerturbationFamily::Bump { center, width } => {
                if center.len() != grid.dimension() || width.is_nan() || *width <= 0.0 {
                    return Err(Error::Config(
                        "bump needs a center matching the grid dimension and a positive width"
                            .into(),
                    ));
                }
                let bump = BumpKernel {
                    base: *base,
                    amplitude: level,
                    center: center.clone(),
                    width: *width,
                };
                KernelMatrix::assemble(&bump, grid, options)
            }
        }
    }
}

/// `(1 − θ) J₀ + θ J₁`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedKernel {
    pub base: KernelSpec,
    pub other: KernelSpec,
    pub theta: f64,
}

impl KernelFunction for MixedKernel {
    fn value(&self, grid: &Grid, x: &[f64], y: &[f64]) -> f64 {
        (1.0 - self.theta) * self.base.value(grid, x, y) + self.theta * self.other.value(grid, x, y)
    }

    fn gradient(&self, grid: &Grid, x: &[f64], y: &[f64], axis: usize) -> f64 {
        (1.0 - self.theta) * self.base.gradient(grid, x, y, axis)
            + self.theta * self.other.gradient(grid, x, y, axis)
    }

    fn label(&self) -> String {
        format!(
            "mix({}, {}, theta={})",
            self.base.label(),
            self.other.label(),
            self.theta
        )
    }
}

/// `J₀(x, y) + amplitude · φ(x) φ(y)`, `φ(x) = exp(−|x − c|² / 2w²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpKernel {
    pub base: KernelSpec,
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub width: f64,
}

impl BumpKernel {
    fn bump(&self, x: &[f64]) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(&self.center)
            .map(|(x, c)| (x - c) * (x - c))
            .sum();
        (-0.5 * r2 / (self.width * self.width)).exp()
    }
}

impl KernelFunction for BumpKernel {
    fn value(&self, grid: &Grid, x: &[f64], y: &[f64]) -> f64 {
        self.base.value(grid, x, y) + self.amplitude * self.bump(x) * self.bump(y)
    }

    fn gradient(&self, grid: &Grid, x: &[f64], y: &[f64], axis: usize) -> f64 {
        let dphi = -(x[axis] - self.center[axis]) / (self.width * self.width) * self.bump(x);
        self.base.gradient(grid, x, y, axis) + self.amplitude * dphi * self.bump(y)
    }

    fn label(&self) -> String {
        format!(
            "bump({}, amplitude={}, center={:?}, width={})",
            self.base.label(),
            self.amplitude,
            self.center,
            self.width
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityParams {
    pub sampling: SamplingParams,
    /// Twin-run configuration for the deviation ratios.
    pub deviation: IntegratorConfig,
    /// Allowed increase between consecutive semidistances; defaults to `1e-3 r_δ`.
    pub tolerance: Option<f64>,
    /// Required bound on the last semidistance; defaults to `1e-2 r_δ`.
    pub final_threshold: Option<f64>,
    pub assembly: AssemblyOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityReport {
    pub levels: Vec<f64>,
    pub kernel_ids: Vec<String>,
    pub perturbation_sizes: Vec<f64>,
    pub semidistances: Vec<f64>,
    pub deviation_ratios: Vec<f64>,
    pub times: Vec<f64>,
    pub gronwall_envelope: Vec<f64>,
    pub c0_hat: f64,
    pub envelope_rate: f64,
    pub lipschitz: LipschitzConstants,
    /// Envelope violations across all levels; reported, not fatal here.
    pub envelope_violations: usize,
    pub r_delta: f64,
    pub tolerance: f64,
    pub final_threshold: f64,
    pub sample_size: usize,
}

impl ContinuityReport {
    /// Semidistances nonincreasing up to `tolerance` and the last one below `final_threshold`.
    pub fn check_contract(&self) -> Result<()> {
        for (k, w) in self.semidistances.windows(2).enumerate() {
            if w[1] > w[0] + self.tolerance {
                return Err(Error::Diagnostic(format!(
                    "semidistance increased from level {k} ({}) to level {} ({}) beyond tolerance {}",
                    w[0],
                    k + 1,
                    w[1],
                    self.tolerance
                )));
            }
        }
        let last = *self.semidistances.last().unwrap_or(&0.0);
        if last > self.final_threshold {
            return Err(Error::Diagnostic(format!(
                "final semidistance {last} exceeds threshold {}",
                self.final_threshold
            )));
        }
        Ok(())
    }
}

/// Samples the attractor for every perturbation level and for the base kernel
/// with common initial data, without enforcing the contract.
pub fn assess_continuity(
    model: &ModelSpec,
    base: &KernelSpec,
    family: &PerturbationFamily,
    levels: &[f64],
    params: &ContinuityParams,
) -> Result<ContinuityReport> {
    if levels.len() < 3 {
        return Err(Error::Usage(format!(
            "need at least 3 perturbation levels, got {}",
            levels.len()
        )));
    }
    let constants = model.validate()?;
    let kernels: Vec<Arc<KernelMatrix>> = levels
        .iter()
        .map(|&l| {
            family
                .kernel(base, l, Arc::clone(model.grid()), params.assembly)
                .map(Arc::new)
        })
        .collect::<Result<_>>()?;
    let sizes: Vec<f64> = kernels
        .iter()
        .map(|k| model.kernel.l1_distance(k))
        .collect::<Result<_>>()?;
    if let Some(k) = sizes.windows(2).position(|w| w[1] > w[0]) {
        return Err(Error::Usage(format!(
            "perturbation sizes must not increase: level {k} has {} and level {} has {}",
            sizes[k],
            k + 1,
            sizes[k + 1]
        )));
    }

    let reference = sample_attractor(model, &params.sampling)?;
    let samples: Vec<AttractorSample> = kernels
        .par_iter()
        .map(|k| sample_attractor(&model.with_kernel(Arc::clone(k))?, &params.sampling))
        .collect::<Result<_>>()?;
    let semidistances = samples
        .iter()
        .map(|s| hausdorff_semidistance(s, &reference, model.space))
        .collect::<Result<Vec<_>>>()?;

    let s = &params.sampling;
    let u0 = random_field(model.grid(), s.seed, 0, s.initial_radius, model.space, None)?;
    let deviation = deviation_sweep(model, &kernels, &u0, &params.deviation)?;
    let times = deviation.series[0].times.clone();
    let gronwall_envelope = times
        .iter()
        .map(|&t| deviation.c0_hat * (deviation.envelope_rate * t).exp())
        .collect();

    Ok(ContinuityReport {
        levels: levels.to_vec(),
        kernel_ids: kernels.iter().map(|k| k.label().to_string()).collect(),
        perturbation_sizes: sizes,
        semidistances,
        deviation_ratios: deviation.deviation_ratios.clone(),
        times,
        gronwall_envelope,
        c0_hat: deviation.c0_hat,
        envelope_rate: deviation.envelope_rate,
        lipschitz: deviation.lipschitz,
        envelope_violations: deviation.violations.len(),
        r_delta: constants.r_delta,
        tolerance: params.tolerance.unwrap_or(1e-3 * constants.r_delta),
        final_threshold: params.final_threshold.unwrap_or(1e-2 * constants.r_delta),
        sample_size: reference.len(),
    })
}

/// [`assess_continuity`] followed by [`ContinuityReport::check_contract`].
pub fn continuity_experiment(
    model: &ModelSpec,
    base: &KernelSpec,
    family: &PerturbationFamily,
    levels: &[f64],
    params: &ContinuityParams,
) -> Result<ContinuityReport> {
    let report = assess_continuity(model, base, family, levels, params)?;
    report.check_contract()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub threshold: f64,
    pub required_rate: f64,
    pub tolerance: f64,
    /// Records before this time are ignored (twice the absorbing bound of `u0`).
    pub start_time: f64,
    pub qualifying_pairs: usize,
    /// Slowest contraction rate over qualifying consecutive records.
    pub measured_rate: Option<f64>,
}

/// Checks that, once inside the absorbing ball, every gradient norm above the
/// threshold contracts at least at the predicted rate between consecutive records.
pub fn gradient_bound_check(
    model: &ModelSpec,
    u0: &StateField,
    config: &IntegratorConfig,
    tolerance: f64,
) -> Result<GradientCheck> {
    let constants = model.validate()?;
    let gradient = constants.gradient.ok_or_else(|| {
        Error::hypothesis(
            "h_0 > k_f r_delta + c_f",
            "gradient constants unavailable (margin nonpositive or kernel derivatives missing)",
        )
    })?;
    let config = IntegratorConfig {
        exponents: vec![model.space.p()],
        record_gradients: true,
        ..config.clone()
    };
    let record = integrate(model, u0, &config)?;
    let start_time = 2.0 * constants.absorbing_time_bound(u0.lp_norm(model.space));
    let mut check = GradientCheck {
        threshold: gradient.grad_threshold,
        required_rate: gradient.grad_decay_rate,
        tolerance,
        start_time,
        qualifying_pairs: 0,
        measured_rate: None,
    };
    for axis in 0..model.grid().dimension() {
        let g = record
            .gradient_series(0, axis)
            .expect("gradients were recorded");
        for k in 1..record.len() {
            let (t0, t1) = (record.times[k - 1], record.times[k]);
            if t0 < start_time || g[k - 1] <= check.threshold || g[k] <= check.threshold {
                continue;
            }
            let rate = -(g[k] / g[k - 1]).ln() / (t1 - t0);
            check.qualifying_pairs += 1;
            check.measured_rate = Some(check.measured_rate.map_or(rate, |r: f64| r.min(rate)));
            if rate < check.required_rate - tolerance {
                return Err(Error::Diagnostic(format!(
                    "gradient along axis {axis} contracted at rate {rate} on [{t0}, {t1}], \
                     below the required {} (tolerance {tolerance})",
                    check.required_rate
                )));
            }
        }
    }
    Ok(check)
}
