//! Fixed-step time integration: first-order exponential time differencing
//! (the default) and classical RK4 as a reference scheme.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{weighted_norm, Grid, LpSpace, StateField};
use crate::kernel::KernelMatrix;
use crate::model::ModelSpec;

/// Below this value of `h·dt` the φ-function switches to its Taylor series.
pub const PHI_SERIES_THRESHOLD: f64 = 1e-4;

/// Guards `ceil(t_end / dt)` against representation error in the quotient.
const STEP_COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Etd,
    Rk4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
    pub snapshot_every: Option<usize>,
    /// Norm exponents recorded at each record time.
    pub exponents: Vec<f64>,
    pub record_gradients: bool,
}

impl IntegratorConfig {
    pub fn new(scheme: Scheme, dt: f64, t_end: f64) -> Self {
        Self {
            scheme,
            dt,
            t_end,
            record_every: 1,
            snapshot_every: None,
            exponents: vec![2.0],
            record_gradients: false,
        }
    }

    pub fn record_every(mut self, steps: usize) -> Self {
        self.record_every = steps;
        self
    }

    pub fn snapshot_every(mut self, steps: usize) -> Self {
        self.snapshot_every = Some(steps);
        self
    }

    pub fn exponents(mut self, exponents: Vec<f64>) -> Self {
        self.exponents = exponents;
        self
    }

    pub fn with_gradients(mut self) -> Self {
        self.record_gradients = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(Error::Config(format!(
                "t_end must be nonnegative, got {}",
                self.t_end
            )));
        }
        if self.t_end > 0.0 && self.dt > self.t_end {
            return Err(Error::Config(format!(
                "dt = {} exceeds t_end = {}",
                self.dt, self.t_end
            )));
        }
        if self.record_every == 0 || self.snapshot_every == Some(0) {
            return Err(Error::Config(
                "record and snapshot cadences must be at least 1".into(),
            ));
        }
        if self.exponents.is_empty() {
            return Err(Error::Config(
                "at least one norm exponent is required".into(),
            ));
        }
        for &p in &self.exponents {
            LpSpace::new(p)?;
        }
        Ok(())
    }

    /// Number of steps; the last one is shortened when `dt` does not divide `t_end`.
    pub fn step_count(&self) -> usize {
        step_count(self.t_end, self.dt)
    }
}

fn step_count(duration: f64, dt: f64) -> usize {
    if duration <= 0.0 {
        0
    } else {
        (duration / dt - STEP_COUNT_SLACK).ceil().max(1.0) as usize
    }
}

/// Norms recorded along one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub exponents: Vec<f64>,
    /// `lp_norms[record][exponent]`.
    pub lp_norms: Vec<Vec<f64>>,
    /// `grad_lp_norms[record][exponent * dimension + axis]`, when requested.
    pub grad_lp_norms: Option<Vec<Vec<f64>>>,
    pub sup_norms: Vec<f64>,
    pub snapshot_times: Vec<f64>,
    pub snapshots: Vec<StateField>,
    pub final_state: StateField,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// The recorded series for one exponent.
    pub fn norm_series(&self, exponent_index: usize) -> Vec<f64> {
        self.lp_norms.iter().map(|r| r[exponent_index]).collect()
    }

    pub fn gradient_series(&self, exponent_index: usize, axis: usize) -> Option<Vec<f64>> {
        let dim = self.final_state.grid().dimension();
        self.grad_lp_norms
            .as_ref()
            .map(|g| g.iter().map(|r| r[exponent_index * dim + axis]).collect())
    }

    pub fn final_norm(&self, exponent_index: usize) -> f64 {
        self.lp_norms.last().map_or(f64::NAN, |r| r[exponent_index])
    }

    pub fn csv_header(&self) -> String {
        let dim = self.final_state.grid().dimension();
        let mut cols = vec!["t".to_string()];
        cols.extend(self.exponents.iter().map(|p| format!("norm_p{p}")));
        if self.grad_lp_norms.is_some() {
            for p in &self.exponents {
                cols.extend((0..dim).map(|i| format!("grad_norm_p{p}_axis{i}")));
            }
        }
        cols.push("sup_norm".into());
        cols.join(",")
    }

    /// One row per record, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.csv_header())?;
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k]];
            row.extend(&self.lp_norms[k]);
            if let Some(g) = &self.grad_lp_norms {
                row.extend(&g[k]);
            }
            row.push(self.sup_norms[k]);
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// `(1 − e^{−h dt}) / h`, using a series for small `h·dt`.
pub fn phi1(h: f64, dt: f64) -> f64 {
    let z = h * dt;
    if z.abs() < PHI_SERIES_THRESHOLD {
        dt * (1.0 - z / 2.0 + z * z / 6.0 - z * z * z / 24.0)
    } else {
        -(-z).exp_m1() / h
    }
}

#[derive(Debug, Clone)]
struct EtdCoefficients {
    dt: f64,
    decay: Vec<f64>,
    phi: Vec<f64>,
}

impl EtdCoefficients {
    fn new(h: &[f64], dt: f64) -> Self {
        Self {
            dt,
            decay: h.iter().map(|&h| (-h * dt).exp()).collect(),
            phi: h.iter().map(|&h| phi1(h, dt)).collect(),
        }
    }
}

/// Reusable stepping state for one model and step size.
pub struct Stepper<'a> {
    model: &'a ModelSpec,
    scheme: Scheme,
    dt: f64,
    full: Option<EtdCoefficients>,
    partial: Option<EtdCoefficients>,
    ku: Vec<f64>,
    stages: [Vec<f64>; 4],
    work: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a ModelSpec, scheme: Scheme, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Usage(format!(
                "step size must be positive, got {dt}"
            )));
        }
        let n = model.grid().len();
        let full = (scheme == Scheme::Etd).then(|| EtdCoefficients::new(model.decay.values(), dt));
        Ok(Self {
            model,
            scheme,
            dt,
            full,
            partial: None,
            ku: vec![0.0; n],
            stages: std::array::from_fn(|_| vec![0.0; n]),
            work: vec![0.0; n],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// One step of length `dt` (which may be shorter than the nominal step).
    pub fn step_by(&mut self, u: &mut [f64], dt: f64) -> Result<()> {
        match self.scheme {
            Scheme::Etd => self.etd(u, dt)?,
            Scheme::Rk4 => self.rk4(u, dt)?,
        }
        match u.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!("non-finite state at node {i}"))),
        }
    }

    pub fn step(&mut self, u: &mut [f64]) -> Result<()> {
        self.step_by(u, self.dt)
    }

    /// Advances by `duration` with nominal steps and a shortened final step.
    pub fn advance(&mut self, u: &mut [f64], duration: f64) -> Result<()> {
        let steps = step_count(duration, self.dt);
        for k in 0..steps {
            let h = if k + 1 == steps {
                duration - (steps - 1) as f64 * self.dt
            } else {
                self.dt
            };
            self.step_by(u, h)?;
        }
        Ok(())
    }

    fn etd(&mut self, u: &mut [f64], dt: f64) -> Result<()> {
        let h = self.model.decay.values();
        let coeffs = if dt == self.dt {
            self.full.get_or_insert_with(|| EtdCoefficients::new(h, dt))
        } else {
            match &self.partial {
                Some(c) if c.dt == dt => {}
                _ => self.partial = Some(EtdCoefficients::new(h, dt)),
            }
            self.partial.as_ref().expect("just inserted")
        };
        let n = &mut self.stages[0];
        self.model.nonlinear_into(u, &mut self.ku, n)?;
        for i in 0..u.len() {
            u[i] = coeffs.decay[i] * u[i] + coeffs.phi[i] * n[i];
        }
        Ok(())
    }

    fn rk4(&mut self, u: &mut [f64], dt: f64) -> Result<()> {
        let [k1, k2, k3, k4] = &mut self.stages;
        let w = &mut self.work;
        let m = self.model;
        m.rhs_into(u, &mut self.ku, k1)?;
        for i in 0..u.len() {
            w[i] = u[i] + 0.5 * dt * k1[i];
        }
        m.rhs_into(w, &mut self.ku, k2)?;
        for i in 0..u.len() {
            w[i] = u[i] + 0.5 * dt * k2[i];
        }
        m.rhs_into(w, &mut self.ku, k3)?;
        for i in 0..u.len() {
            w[i] = u[i] + dt * k3[i];
        }
        m.rhs_into(w, &mut self.ku, k4)?;
        for i in 0..u.len() {
            u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        Ok(())
    }
}

fn single_step(model: &ModelSpec, u: &StateField, dt: f64, scheme: Scheme) -> Result<StateField> {
    model.check_field(u)?;
    let mut stepper = Stepper::new(model, scheme, dt)?;
    let mut v = u.values().to_vec();
    stepper.step(&mut v)?;
    Ok(StateField::from_parts(Arc::clone(model.grid()), v))
}

/// One exponential time differencing step with the nonlinear terms frozen at `u`.
pub fn step_etd(model: &ModelSpec, u: &StateField, dt: f64) -> Result<StateField> {
    single_step(model, u, dt, Scheme::Etd)
}

pub fn step_rk4(model: &ModelSpec, u: &StateField, dt: f64) -> Result<StateField> {
    single_step(model, u, dt, Scheme::Rk4)
}

struct Recorder {
    spaces: Vec<LpSpace>,
    gradients: bool,
    record: TrajectoryRecord,
}

impl Recorder {
    fn push(&mut self, t: f64, grid: &Arc<Grid>, u: &[f64]) -> Result<()> {
        let w = grid.weights();
        self.record.times.push(t);
        self.record.lp_norms.push(
            self.spaces
                .iter()
                .map(|s| weighted_norm(w, u, s.p()))
                .collect(),
        );
        self.record
            .sup_norms
            .push(weighted_norm(w, u, f64::INFINITY));
        if self.gradients {
            let field = StateField::from_parts(Arc::clone(grid), u.to_vec());
            let grads = (0..grid.dimension())
                .map(|axis| field.gradient(axis))
                .collect::<Result<Vec<_>>>()?;
            let row = self
                .spaces
                .iter()
                .flat_map(|s| grads.iter().map(move |g| g.lp_norm(*s)))
                .collect();
            self.record
                .grad_lp_norms
                .get_or_insert_with(Vec::new)
                .push(row);
        }
        Ok(())
    }
}

/// Steps `u0` to `config.t_end`, recording norms at the configured cadence.
/// The initial and final states are always recorded.
pub fn integrate(
    model: &ModelSpec,
    u0: &StateField,
    config: &IntegratorConfig,
) -> Result<TrajectoryRecord> {
    config.validate()?;
    model.check_field(u0)?;
    let grid = Arc::clone(model.grid());
    let mut recorder = Recorder {
        spaces: config
            .exponents
            .iter()
            .map(|&p| LpSpace::new(p))
            .collect::<Result<_>>()?,
        gradients: config.record_gradients,
        record: TrajectoryRecord {
            times: Vec::new(),
            exponents: config.exponents.clone(),
            lp_norms: Vec::new(),
            grad_lp_norms: None,
            sup_norms: Vec::new(),
            snapshot_times: Vec::new(),
            snapshots: Vec::new(),
            final_state: u0.clone(),
        },
    };
    let mut u = u0.values().to_vec();
    recorder.push(0.0, &grid, &u)?;
    if config.snapshot_every.is_some() {
        recorder.record.snapshot_times.push(0.0);
        recorder.record.snapshots.push(u0.clone());
    }

    let steps = config.step_count();
    let mut stepper = Stepper::new(model, config.scheme, config.dt)?;
    for k in 1..=steps {
        let last = k == steps;
        let (dt, t) = if last {
            (config.t_end - (steps - 1) as f64 * config.dt, config.t_end)
        } else {
            (config.dt, k as f64 * config.dt)
        };
        stepper.step_by(&mut u, dt).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("at t = {t}: {msg}")),
            other => other,
        })?;
        if last || k % config.record_every == 0 {
            recorder.push(t, &grid, &u)?;
        }
        if let Some(every) = config.snapshot_every {
            if k % every == 0 {
                recorder.record.snapshot_times.push(t);
                recorder
                    .record
                    .snapshots
                    .push(StateField::from_parts(Arc::clone(&grid), u.clone()));
            }
        }
    }
    recorder.record.final_state = StateField::from_parts(grid, u);
    Ok(recorder.record)
}

/// A field with nodewise uniform values, scaled to `‖u‖_p = radius` exactly.
///
/// The generator is seeded with `seed` and positioned on stream `stream`, so
/// fields for distinct streams are independent and order-free. With a
/// smoothing kernel the noise is mollified before scaling.
pub fn random_field(
    grid: &Arc<Grid>,
    seed: u64,
    stream: u64,
    radius: f64,
    space: LpSpace,
    smoothing: Option<&KernelMatrix>,
) -> Result<StateField> {
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::Usage(format!(
            "radius must be nonnegative, got {radius}"
        )));
    }
    if radius == 0.0 {
        return Ok(StateField::zeros(Arc::clone(grid)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let noise: Vec<f64> = (0..grid.len())
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    let mut field = StateField::from_parts(Arc::clone(grid), noise);
    if let Some(k) = smoothing {
        field = k.apply(&field)?;
    }
    let norm = field.lp_norm(space);
    if norm.is_nan() || norm <= 0.0 {
        return Err(Error::Numerical("random field has zero norm".into()));
    }
    Ok(field.scaled(radius / norm))
}

/// `count` random initial fields of norm `radius` in the model's space.
pub fn random_initial_fields(
    model: &ModelSpec,
    seed: u64,
    count: usize,
    radius: f64,
    smoothing: Option<&KernelMatrix>,
) -> Result<Vec<StateField>> {
    (0..count as u64)
        .map(|m| random_field(model.grid(), seed, m, radius, model.space, smoothing))
        .collect()
}

/// Evolves `count` random fields of norm `radius`; member `m` uses stream `m`.
pub fn integrate_ensemble(
    model: &ModelSpec,
    seed: u64,
    count: usize,
    radius: f64,
    config: &IntegratorConfig,
) -> Result<Vec<TrajectoryRecord>> {
    if count == 0 {
        return Err(Error::Usage("ensemble needs at least one member".into()));
    }
    let fields = random_initial_fields(model, seed, count, radius, None)?;
    fields
        .par_iter()
        .map(|u0| integrate(model, u0, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use crate::model::{DecaySpec, GainFamily, ModelBuilder, ReactionFamily};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit(n: usize) -> Arc<Grid> {
        Arc::new(Grid::interval(0.0, 1.0, n).unwrap())
    }

    fn pure_decay(grid: Arc<Grid>) -> ModelSpec {
        ModelBuilder::new(grid)
            .decay(DecaySpec::Affine { h0: 0.7, h1: 2.0 })
            .build()
            .unwrap()
    }

    fn nonlinear(grid: Arc<Grid>) -> ModelSpec {
        ModelBuilder::new(grid)
            .decay(DecaySpec::Affine { h0: 1.0, h1: 0.5 })
            .reaction(
                ReactionFamily::SaturatedAffine {
                    alpha: 0.2,
                    beta: 0.1,
                    beta_wave: 0.05,
                },
                0.2,
                0.6,
            )
            .gain(GainFamily::ScaledTanh { a: 0.4, b: 1.5 }, 0.6, 0.6)
            .kernel(KernelSpec::tent(0.2))
            .build()
            .unwrap()
    }

    #[test]
    fn phi_series_branch_is_continuous() {
        for z in [1e-7, 1e-5, 0.999_999 * PHI_SERIES_THRESHOLD] {
            let exact = -(-z).exp_m1() / z;
            assert!(
                (phi1(z, 1.0) - exact).abs() <= 4.0 * f64::EPSILON * exact,
                "{z}"
            );
        }
        assert_eq!(phi1(0.0, 0.3), 0.3);
        assert_abs_diff_eq!(
            phi1(2.0, 0.5),
            (1.0 - (-1.0f64).exp()) / 2.0,
            epsilon = 1e-16
        );
    }

    #[test]
    fn pure_decay_step_is_exact() {
        let g = unit(32);
        let m = pure_decay(g.clone());
        let u = StateField::from_fn(g, |x| (5.0 * x[0]).cos());
        for dt in [1e-3, 0.1, 2.5] {
            let v = step_etd(&m, &u, dt).unwrap();
            for ((v, u), h) in v.values().iter().zip(u.values()).zip(m.decay.values()) {
                assert_abs_diff_eq!(*v, (-h * dt).exp() * u, epsilon = 1e-14);
            }
        }
    }

    fn fixed_point_model(grid: Arc<Grid>) -> ModelSpec {
        ModelBuilder::new(grid)
            .decay(DecaySpec::Constant { h0: 1.0 })
            .gain(GainFamily::Linear { gamma: 0.5 }, 0.5, 0.1)
            .reaction(
                ReactionFamily::SaturatedAffine {
                    alpha: 0.0,
                    beta: 0.5,
                    beta_wave: 0.0,
                },
                0.1,
                0.5,
            )
            .build()
            .unwrap()
    }

    #[test]
    fn equilibria_are_fixed_points() {
        let g = unit(16);
        let m = fixed_point_model(g.clone());
        let u = StateField::constant(g, 1.0);
        for v in [
            step_etd(&m, &u, 0.3).unwrap(),
            step_rk4(&m, &u, 0.3).unwrap(),
        ] {
            for &x in v.values() {
                assert_abs_diff_eq!(x, 1.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn rk4_scalar_decay() {
        let g = unit(4);
        let m = ModelBuilder::new(g.clone()).build().unwrap();
        let v = step_rk4(&m, &StateField::constant(g, 1.0), 0.1).unwrap();
        let taylor = 1.0 - 0.1 + 0.01 / 2.0 - 0.001 / 6.0 + 0.0001 / 24.0;
        assert_abs_diff_eq!(v.values()[0], taylor, epsilon = 1e-15);
        assert_abs_diff_eq!(v.values()[0], 0.9048375, epsilon = 1e-7);
    }

    #[test]
    fn zero_horizon_records_only_the_start() {
        let g = unit(16);
        let m = nonlinear(g.clone());
        let u = StateField::from_fn(g, |x| x[0]);
        let r = integrate(&m, &u, &IntegratorConfig::new(Scheme::Etd, 0.1, 0.0)).unwrap();
        assert_eq!(r.times, vec![0.0]);
        assert_eq!(r.final_state, u);
    }

    #[test]
    fn pure_decay_norm_at_unit_time() {
        let g = unit(64);
        let m = ModelBuilder::new(g.clone())
            .decay(DecaySpec::Constant { h0: 1.3 })
            .build()
            .unwrap();
        let u = StateField::from_fn(g, |x| 1.0 + x[0] * x[0]);
        let r = integrate(
            &m,
            &u,
            &IntegratorConfig::new(Scheme::Etd, 0.01, 1.0).record_every(10),
        )
        .unwrap();
        assert_eq!(r.len(), 11);
        let l2 = LpSpace::new(2.0).unwrap();
        assert_abs_diff_eq!(
            r.final_norm(0),
            (-1.3f64).exp() * u.lp_norm(l2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn shortened_last_step_lands_on_the_horizon() {
        let g = unit(16);
        let m = pure_decay(g.clone());
        let u = StateField::constant(g, 1.0);
        let c = IntegratorConfig::new(Scheme::Etd, 0.3, 1.0);
        assert_eq!(c.step_count(), 4);
        let r = integrate(&m, &u, &c).unwrap();
        assert_eq!(r.times, vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]);
        for (v, h) in r.final_state.values().iter().zip(m.decay.values()) {
            assert_abs_diff_eq!(*v, (-h).exp(), epsilon = 1e-14);
        }
        assert_eq!(
            IntegratorConfig::new(Scheme::Etd, 0.1, 1.0).step_count(),
            10
        );
    }

    #[test]
    fn semigroup_composition() {
        let g = unit(32);
        let m = nonlinear(g.clone());
        let u = StateField::from_fn(g, |x| 2.0 * (3.0 * x[0]).sin());
        let once = integrate(&m, &u, &IntegratorConfig::new(Scheme::Etd, 0.01, 1.0)).unwrap();
        let half = IntegratorConfig::new(Scheme::Etd, 0.01, 0.5);
        let twice = integrate(&m, &integrate(&m, &u, &half).unwrap().final_state, &half).unwrap();
        let l2 = LpSpace::new(2.0).unwrap();
        let d = once.final_state.distance(&twice.final_state, l2).unwrap();
        assert!(d <= 0.01, "{d}");
    }

    #[test]
    fn config_rejects_bad_values() {
        let base = IntegratorConfig::new(Scheme::Etd, 0.1, 1.0);
        assert!(base.validate().is_ok());
        for bad in [
            IntegratorConfig {
                dt: 0.0,
                ..base.clone()
            },
            IntegratorConfig {
                dt: 2.0,
                ..base.clone()
            },
            IntegratorConfig {
                t_end: -1.0,
                ..base.clone()
            },
            IntegratorConfig {
                record_every: 0,
                ..base.clone()
            },
            IntegratorConfig {
                exponents: vec![0.5],
                ..base.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn blow_up_reports_the_time() {
        let g = unit(8);
        let m = ModelBuilder::new(g.clone())
            .decay(DecaySpec::Constant { h0: 1.0 })
            .gain(GainFamily::Linear { gamma: 1e6 }, 0.1, 0.1)
            .build()
            .unwrap();
        let u = StateField::constant(g, 1.0);
        let err = integrate(&m, &u, &IntegratorConfig::new(Scheme::Rk4, 0.5, 100.0)).unwrap_err();
        match err {
            Error::Numerical(msg) => assert!(msg.starts_with("at t = "), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let g = Arc::new(Grid::new(2, &[(0.0, 1.0), (0.0, 1.0)], 8).unwrap());
        let m = nonlinear(g.clone());
        let u = StateField::from_fn(g, |x| x[0] * x[1]);
        let c = IntegratorConfig::new(Scheme::Etd, 0.1, 0.2)
            .exponents(vec![1.0, 2.0])
            .with_gradients();
        let r = integrate(&m, &u, &c).unwrap();
        assert_eq!(
            r.csv_header(),
            "t,norm_p1,norm_p2,grad_norm_p1_axis0,grad_norm_p1_axis1,grad_norm_p2_axis0,grad_norm_p2_axis1,sup_norm"
        );
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1].split(',').count(), 8);
        assert!(lines[1].starts_with("0.0000000000000000e0,"));
        let parsed: f64 = lines[2].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(parsed, r.lp_norms[1][1]);
    }

    #[test]
    fn random_fields_hit_the_radius() {
        let g = unit(64);
        let l1 = LpSpace::new(1.0).unwrap();
        let u = random_field(&g, 3, 5, 2.5, l1, None).unwrap();
        assert_abs_diff_eq!(u.lp_norm(l1), 2.5, epsilon = 1e-12);
        assert_eq!(u, random_field(&g, 3, 5, 2.5, l1, None).unwrap());
        assert_ne!(u, random_field(&g, 3, 6, 2.5, l1, None).unwrap());
        assert!(random_field(&g, 3, 5, 0.0, l1, None)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn ensemble_of_zero_radius_is_the_zero_trajectory() {
        let g = unit(16);
        let m = nonlinear(g.clone());
        let c = IntegratorConfig::new(Scheme::Etd, 0.1, 1.0);
        let runs = integrate_ensemble(&m, 1, 1, 0.0, &c).unwrap();
        let direct = integrate(&m, &StateField::zeros(g), &c).unwrap();
        assert_eq!(runs, vec![direct]);
    }

    #[test]
    fn ensembles_are_reproducible_and_ordered() {
        let g = unit(32);
        let m = nonlinear(g.clone());
        let c = IntegratorConfig::new(Scheme::Etd, 0.05, 1.0);
        let a = integrate_ensemble(&m, 9, 6, 4.0, &c).unwrap();
        let b = integrate_ensemble(&m, 9, 6, 4.0, &c).unwrap();
        assert_eq!(a, b);
        let third = random_field(&g, 9, 2, 4.0, m.space, None).unwrap();
        assert_eq!(a[2], integrate(&m, &third, &c).unwrap());
    }

    #[test]
    fn ensemble_settles_inside_the_ball() {
        let g = unit(64);
        let m = nonlinear(g);
        let k = m.validate().unwrap();
        let radius = 10.0 * k.r_delta;
        let t_end = 2.0 * k.absorbing_time_bound(radius);
        let c = IntegratorConfig::new(Scheme::Etd, 0.01, t_end).record_every(100);
        for r in integrate_ensemble(&m, 4, 32, radius, &c).unwrap() {
            assert!(r.final_norm(0) <= k.r_delta);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn exact_decay_for_any_positive_profile(
            h0 in 0.01f64..5.0,
            h1 in 0.0f64..5.0,
            dt in 1e-6f64..3.0,
            seed in any::<u64>(),
        ) {
            let g = unit(32);
            let m = ModelBuilder::new(g.clone())
                .decay(DecaySpec::Affine { h0, h1 })
                .build()
                .unwrap();
            let u = random_field(&g, seed, 0, 1.0, m.space, None).unwrap();
            let v = step_etd(&m, &u, dt).unwrap();
            for ((v, u), h) in v.values().iter().zip(u.values()).zip(m.decay.values()) {
                prop_assert!((v - (-h * dt).exp() * u).abs() <= 1e-14);
            }
        }

        #[test]
        fn record_times_increase(dt in 0.01f64..0.5, t_end in 0.5f64..3.0, every in 1usize..5) {
            let g = unit(8);
            let m = pure_decay(g.clone());
            let c = IntegratorConfig::new(Scheme::Etd, dt, t_end).record_every(every);
            let r = integrate(&m, &StateField::constant(g, 1.0), &c).unwrap();
            prop_assert!(r.times.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(*r.times.last().unwrap(), t_end);
            prop_assert_eq!(r.lp_norms.len(), r.times.len());
            prop_assert_eq!(r.sup_norms.len(), r.times.len());
        }
    }
}
