//! Problem data `(h, f, g, J)` for `∂ₜu = −h u + g(K_J u) + f(x, u)`,
//! hypothesis validation and the constants derived from it.
//!
//! Growth constants are declared by the user and checked by dense sampling
//! over a fixed `(x, s)` lattice rather than proven symbolically.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, LpSpace, StateField};
use crate::kernel::{AssemblyOptions, KernelMatrix, KernelSpec};

/// Largest |s| probed by the growth-bound lattice.
pub const SAMPLE_STATE_RANGE: f64 = 1e3;
/// Samples per interval in [`ModelSpec::lipschitz_estimate`].
pub const LIPSCHITZ_SAMPLES: usize = 10_001;
/// Margin added to the bounded set used for Lipschitz estimates.
pub const LIPSCHITZ_MARGIN: f64 = 0.1;

const SAMPLED_X: usize = 100;
const SAMPLED_ROUNDOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecaySpec {
    Constant {
        h0: f64,
    },
    /// `h(x) = h0 + h1 · Σᵢ (xᵢ − aᵢ)`, so `h0` is the minimum over Ω.
    Affine {
        h0: f64,
        h1: f64,
    },
}

/// The decay coefficient `h` sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayField {
    spec: DecaySpec,
    values: Vec<f64>,
    sup: f64,
    dimension: usize,
}

impl DecayField {
    pub fn new(grid: &Grid, spec: DecaySpec) -> Result<Self> {
        let (h0, h1) = match spec {
            DecaySpec::Constant { h0 } => (h0, 0.0),
            DecaySpec::Affine { h0, h1 } => (h0, h1),
        };
        if !(h0.is_finite() && h0 > 0.0) {
            return Err(Error::hypothesis("h(x) ≥ h_0 > 0", format!("h_0 = {h0}")));
        }
        if !(h1.is_finite() && h1 >= 0.0) {
            return Err(Error::Config(format!(
                "decay slope h1 must be nonnegative, got {h1}"
            )));
        }
        let lower: Vec<f64> = grid.bounds().iter().map(|b| b.0).collect();
        let values = grid
            .nodes()
            .map(|x| h0 + h1 * x.iter().zip(&lower).map(|(x, a)| x - a).sum::<f64>())
            .collect();
        let extent: f64 = grid.bounds().iter().map(|(a, b)| b - a).sum();
        Ok(Self {
            spec,
            values,
            sup: h0 + h1 * extent,
            dimension: grid.dimension(),
        })
    }

    pub fn spec(&self) -> DecaySpec {
        self.spec
    }

    pub fn h0(&self) -> f64 {
        match self.spec {
            DecaySpec::Constant { h0 } | DecaySpec::Affine { h0, .. } => h0,
        }
    }

    /// The constant lower bound on every partial derivative (zero when constant).
    pub fn h1(&self) -> f64 {
        match self.spec {
            DecaySpec::Constant { .. } => 0.0,
            DecaySpec::Affine { h1, .. } => h1,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup
    }

    /// `‖h‖_∞ + Σᵢ ‖∂ᵢh‖_∞` over the closed box.
    pub fn w1_inf_norm(&self) -> f64 {
        self.sup + self.dimension as f64 * self.h1()
    }
}

/// `f(x, s) = φ(s) + β(x)` with `β(x) = beta + beta_wave · sin(2π Σ xᵢ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReactionFamily {
    Zero,
    /// `φ(s) = alpha · tanh(s)`.
    SaturatedAffine {
        alpha: f64,
        #[serde(default)]
        beta: f64,
        #[serde(default)]
        beta_wave: f64,
    },
    /// `φ(s) = a · s / (1 + s²)`.
    LinearSaturated {
        a: f64,
        #[serde(default)]
        beta: f64,
        #[serde(default)]
        beta_wave: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactionSpec {
    pub family: ReactionFamily,
    pub k_f: f64,
    pub c_f: f64,
}

impl ReactionSpec {
    pub fn new(family: ReactionFamily, k_f: f64, c_f: f64) -> Self {
        Self { family, k_f, c_f }
    }

    fn offsets(&self) -> (f64, f64) {
        match self.family {
            ReactionFamily::Zero => (0.0, 0.0),
            ReactionFamily::SaturatedAffine {
                beta, beta_wave, ..
            }
            | ReactionFamily::LinearSaturated {
                beta, beta_wave, ..
            } => (beta, beta_wave),
        }
    }

    /// The state-dependent part `φ(s)`.
    pub fn state_part(&self, s: f64) -> f64 {
        match self.family {
            ReactionFamily::Zero => 0.0,
            ReactionFamily::SaturatedAffine { alpha, .. } => alpha * s.tanh(),
            ReactionFamily::LinearSaturated { a, .. } => a * s / (1.0 + s * s),
        }
    }

    /// `∂₂f(x, s) = φ′(s)`.
    pub fn d_state(&self, s: f64) -> f64 {
        match self.family {
            ReactionFamily::Zero => 0.0,
            ReactionFamily::SaturatedAffine { alpha, .. } => {
                let c = s.cosh();
                alpha / (c * c)
            }
            ReactionFamily::LinearSaturated { a, .. } => {
                let q = 1.0 + s * s;
                a * (1.0 - s * s) / (q * q)
            }
        }
    }

    /// `β(x)`.
    pub fn offset(&self, x: &[f64]) -> f64 {
        let (beta, wave) = self.offsets();
        if wave == 0.0 {
            beta
        } else {
            beta + wave * (2.0 * PI * x.iter().sum::<f64>()).sin()
        }
    }

    /// `∂f/∂x_axis`, which only sees `β`.
    pub fn d_space(&self, x: &[f64], _axis: usize) -> f64 {
        let (_, wave) = self.offsets();
        2.0 * PI * wave * (2.0 * PI * x.iter().sum::<f64>()).cos()
    }

    pub fn value(&self, x: &[f64], s: f64) -> f64 {
        self.state_part(s) + self.offset(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum GainFamily {
    Zero,
    Linear {
        gamma: f64,
    },
    /// `g(s) = a · tanh(b s)`.
    ScaledTanh {
        a: f64,
        b: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSpec {
    pub family: GainFamily,
    pub k_g: f64,
    pub c_g: f64,
}

impl GainSpec {
    pub fn new(family: GainFamily, k_g: f64, c_g: f64) -> Self {
        Self { family, k_g, c_g }
    }

    pub fn value(&self, s: f64) -> f64 {
        match self.family {
            GainFamily::Zero => 0.0,
            GainFamily::Linear { gamma } => gamma * s,
            GainFamily::ScaledTanh { a, b } => a * (b * s).tanh(),
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match self.family {
            GainFamily::Zero => 0.0,
            GainFamily::Linear { gamma } => gamma,
            GainFamily::ScaledTanh { a, b } => {
                let c = (b * s).cosh();
                a * b / (c * c)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.family, GainFamily::Zero)
    }
}

/// Constants of the W^{1,p} contraction estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientConstants {
    /// `h₀ − (k_f r_δ + c_f)`.
    pub grad_epsilon: f64,
    pub grad_bound_m: f64,
    /// `M (1 + μ) / grad_epsilon`.
    pub grad_threshold: f64,
    /// `μ / (1 + μ) · grad_epsilon`.
    pub grad_decay_rate: f64,
}

impl GradientConstants {
    pub fn new(grad_epsilon: f64, grad_bound_m: f64, mu: f64) -> Self {
        Self {
            grad_epsilon,
            grad_bound_m,
            grad_threshold: grad_bound_m * (1.0 + mu) / grad_epsilon,
            grad_decay_rate: mu / (1.0 + mu) * grad_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedConstants {
    /// Radius of the absorbing ball in `L^p`.
    pub r_delta: f64,
    /// `h₀ − k_f − k_g`.
    pub epsilon: f64,
    /// `δ / (1 + δ) · ε`, the contraction rate of `‖u‖_p` outside the ball.
    pub norm_decay_rate: f64,
    pub gradient: Option<GradientConstants>,
}

impl DerivedConstants {
    /// `(c_f + c_g)(1 + δ) max{1, |Ω|} / ε`.
    pub fn absorbing_radius(c_f: f64, c_g: f64, delta: f64, measure: f64, epsilon: f64) -> f64 {
        (c_f + c_g) * (1.0 + delta) * measure.max(1.0) / epsilon
    }

    pub fn norm_decay_rate(delta: f64, epsilon: f64) -> f64 {
        delta / (1.0 + delta) * epsilon
    }

    /// Time after which `‖u(t)‖_p ≤ r_δ` is guaranteed from `‖u₀‖_p = initial_norm`.
    pub fn absorbing_time_bound(&self, initial_norm: f64) -> f64 {
        if initial_norm <= self.r_delta {
            0.0
        } else {
            (initial_norm / self.r_delta).ln() / self.norm_decay_rate
        }
    }
}

/// Where a sampled growth bound was tightest (or violated).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
}

impl InequalityCheck {
    fn strict(name: &str, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            slack: rhs - lhs,
            holds: lhs < rhs,
            witness: None,
        }
    }

    fn sampled(name: &str, worst: SampledWorst) -> Self {
        Self {
            name: name.to_string(),
            lhs: worst.lhs,
            rhs: worst.rhs,
            slack: worst.rhs - worst.lhs,
            holds: worst.lhs <= worst.rhs + SAMPLED_ROUNDOFF * (1.0 + worst.rhs.abs()),
            witness: Some(Witness {
                x: worst.x,
                s: worst.s,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<InequalityCheck>,
    pub constants: Option<DerivedConstants>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.constants.is_some() && self.checks.iter().all(|c| c.holds)
    }

    pub fn first_failure(&self) -> Option<&InequalityCheck> {
        self.checks.iter().find(|c| !c.holds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzConstants {
    pub gain: f64,
    pub reaction: f64,
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub decay: DecayField,
    pub reaction: ReactionSpec,
    pub gain: GainSpec,
    pub kernel: Arc<KernelMatrix>,
    pub space: LpSpace,
    pub delta: f64,
    pub mu: f64,
    pub gradient_diagnostics: bool,
    reaction_offsets: Vec<f64>,
}

impl ModelSpec {
    pub fn new(
        decay: DecaySpec,
        reaction: ReactionSpec,
        gain: GainSpec,
        kernel: Arc<KernelMatrix>,
        space: LpSpace,
        delta: f64,
        mu: f64,
    ) -> Result<Self> {
        let grid = Arc::clone(kernel.grid());
        for (name, v) in [("delta", delta), ("mu", mu)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let decay = DecayField::new(&grid, decay)?;
        let reaction_offsets = grid.nodes().map(|x| reaction.offset(x)).collect();
        Ok(Self {
            decay,
            reaction,
            gain,
            kernel,
            space,
            delta,
            mu,
            gradient_diagnostics: false,
            reaction_offsets,
        })
    }

    pub fn with_gradient_diagnostics(mut self, enabled: bool) -> Self {
        self.gradient_diagnostics = enabled;
        self
    }

    /// The same model driven by another kernel on the same grid.
    pub fn with_kernel(&self, kernel: Arc<KernelMatrix>) -> Result<Self> {
        if !kernel.grid().same_as(self.grid()) {
            return Err(Error::Usage(
                "replacement kernel lives on a different grid".into(),
            ));
        }
        Ok(Self {
            kernel,
            ..self.clone()
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.kernel.grid()
    }

    pub fn h0(&self) -> f64 {
        self.decay.h0()
    }

    /// Runs every hypothesis check and collects the outcome without failing.
    pub fn assess(&self) -> ValidationReport {
        let r = &self.reaction;
        let g = &self.gain;
        let h0 = self.h0();
        let grid = self.grid();
        let mut checks = Vec::new();

        let min_h = self
            .decay
            .values()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        checks.push(InequalityCheck {
            name: "h(x) >= h_0 > 0".into(),
            lhs: h0,
            rhs: min_h,
            slack: min_h - h0,
            holds: h0 > 0.0 && min_h >= h0,
            witness: None,
        });
        for (name, v) in [
            ("k_f", r.k_f),
            ("c_f", r.c_f),
            ("k_g", g.k_g),
            ("c_g", g.c_g),
        ] {
            checks.push(InequalityCheck::strict(&format!("{name} > 0"), 0.0, v));
        }
        checks.push(InequalityCheck::strict(
            "k_f + k_g < h_0",
            r.k_f + g.k_g,
            h0,
        ));

        let lattice_x = sample_points(grid);
        let lattice_s = sample_states();
        let dim = grid.dimension();
        let f_bound = |s: f64| r.k_f * s.abs() + r.c_f;
        checks.push(InequalityCheck::sampled(
            "|f(x,s)| <= k_f|s| + c_f",
            worst_excess(&lattice_x, &lattice_s, |x, s| r.value(x, s).abs(), f_bound),
        ));
        checks.push(InequalityCheck::sampled(
            "|d2 f(x,s)| <= k_f|s| + c_f",
            worst_excess(&lattice_x, &lattice_s, |_, s| r.d_state(s).abs(), f_bound),
        ));
        for axis in 0..dim {
            checks.push(InequalityCheck::sampled(
                &format!("|d1 f(x,s)|_{axis} <= k_f|s| + c_f"),
                worst_excess(
                    &lattice_x,
                    &lattice_s,
                    |x, _| r.d_space(x, axis).abs(),
                    f_bound,
                ),
            ));
        }
        let origin = [vec![0.0; dim]];
        let g_bound = |s: f64| g.k_g * s.abs() + g.c_g;
        checks.push(InequalityCheck::sampled(
            "|g(s)| <= k_g|s| + c_g",
            worst_excess(&origin, &lattice_s, |_, s| g.value(s).abs(), g_bound),
        ));
        checks.push(InequalityCheck::sampled(
            "|g'(s)| <= k_g|s| + c_g",
            worst_excess(&origin, &lattice_s, |_, s| g.derivative(s).abs(), g_bound),
        ));

        let epsilon = h0 - r.k_f - g.k_g;
        let positive = [r.k_f, r.c_f, g.k_g, g.c_g].iter().all(|&v| v > 0.0);
        let constants = (epsilon > 0.0 && positive).then(|| {
            let r_delta = DerivedConstants::absorbing_radius(
                r.c_f,
                g.c_g,
                self.delta,
                grid.measure(),
                epsilon,
            );
            DerivedConstants {
                r_delta,
                epsilon,
                norm_decay_rate: DerivedConstants::norm_decay_rate(self.delta, epsilon),
                gradient: self.gradient_constants(r_delta),
            }
        });

        if self.gradient_diagnostics {
            checks.push(InequalityCheck::strict(
                "d_i h(x) >= h_1 > 0",
                0.0,
                self.decay.h1(),
            ));
            checks.push(InequalityCheck {
                name: "||d_i J||_r < inf (kernel derivatives assembled)".into(),
                lhs: 0.0,
                rhs: 0.0,
                slack: 0.0,
                holds: self.kernel.has_derivatives(),
                witness: None,
            });
            if let Some(c) = &constants {
                checks.push(InequalityCheck::strict(
                    "h_0 > k_f r_delta + c_f",
                    r.k_f * c.r_delta + r.c_f,
                    h0,
                ));
            }
        }

        ValidationReport { checks, constants }
    }

    /// Checks every hypothesis and returns the derived constants.
    pub fn validate(&self) -> Result<DerivedConstants> {
        let report = self.assess();
        if let Some(failed) = report.first_failure() {
            let mut detail = format!(
                "lhs = {}, rhs = {}, slack = {}",
                failed.lhs, failed.rhs, failed.slack
            );
            if let Some(w) = &failed.witness {
                detail.push_str(&format!(" at x = {:?}, s = {}", w.x, w.s));
            }
            return Err(Error::hypothesis(failed.name.clone(), detail));
        }
        report
            .constants
            .ok_or_else(|| Error::hypothesis("k_f + k_g < h_0", "no derived constants"))
    }

    fn gradient_constants(&self, r_delta: f64) -> Option<GradientConstants> {
        let r = &self.reaction;
        let g = &self.gain;
        let grad_epsilon = self.h0() - (r.k_f * r_delta + r.c_f);
        if grad_epsilon <= 0.0 || !self.kernel.has_derivatives() {
            return None;
        }
        let p = self.space.p();
        let root = self.grid().measure().powf(1.0 / p);
        let h_norm = self.decay.w1_inf_norm();
        let m = (0..self.grid().dimension())
            .filter_map(|axis| self.kernel.derivative_p_norm(axis, self.space.conjugate()))
            .map(|dj| {
                (r_delta * dj * (g.k_g * r_delta + g.c_g * root)
                    + (r.k_f * r_delta + r.c_f * root)
                    + p * r_delta * h_norm)
                    / p
            })
            .fold(0.0, f64::max);
        Some(GradientConstants::new(grad_epsilon, m, self.mu))
    }

    /// `g(K u) + f(x, u)` into `out`; `ku` is scratch for the matvec.
    pub fn nonlinear_into(&self, u: &[f64], ku: &mut [f64], out: &mut [f64]) -> Result<()> {
        self.kernel.apply_into(u, ku);
        for i in 0..u.len() {
            out[i] =
                self.gain.value(ku[i]) + self.reaction.state_part(u[i]) + self.reaction_offsets[i];
        }
        check_finite(out)
    }

    /// `F(u) = −h u + g(K u) + f(x, u)` into `out`.
    pub fn rhs_into(&self, u: &[f64], ku: &mut [f64], out: &mut [f64]) -> Result<()> {
        self.kernel.apply_into(u, ku);
        let h = self.decay.values();
        for i in 0..u.len() {
            out[i] = -h[i] * u[i]
                + self.gain.value(ku[i])
                + self.reaction.state_part(u[i])
                + self.reaction_offsets[i];
        }
        check_finite(out)
    }

    pub fn eval_rhs(&self, u: &StateField) -> Result<StateField> {
        self.check_field(u)?;
        let n = u.len();
        let mut ku = vec![0.0; n];
        let mut out = vec![0.0; n];
        self.rhs_into(u.values(), &mut ku, &mut out)?;
        Ok(StateField::from_parts(Arc::clone(self.grid()), out))
    }

    /// `DF(u) v = −h v + g′(K u)·K v + ∂₂f(x, u) v`.
    pub fn apply_derivative(&self, u: &StateField, v: &StateField) -> Result<StateField> {
        self.check_field(u)?;
        self.check_field(v)?;
        let n = u.len();
        let mut ku = vec![0.0; n];
        let mut kv = vec![0.0; n];
        self.kernel.apply_into(u.values(), &mut ku);
        self.kernel.apply_into(v.values(), &mut kv);
        let h = self.decay.values();
        let (u, v) = (u.values(), v.values());
        let out: Vec<f64> = (0..n)
            .map(|i| {
                -h[i] * v[i]
                    + self.gain.derivative(ku[i]) * kv[i]
                    + self.reaction.d_state(u[i]) * v[i]
            })
            .collect();
        check_finite(&out)?;
        Ok(StateField::from_parts(Arc::clone(self.grid()), out))
    }

    /// Sampled `sup |g′|` and `sup |∂₂f|` on the bounded set reached by states
    /// with sup-norm at most `radius`, enlarged by a 10% margin.
    pub fn lipschitz_estimate(&self, radius: f64) -> LipschitzConstants {
        let reach = (1.0 + LIPSCHITZ_MARGIN) * radius;
        let gain_reach = reach * self.kernel.p_norm(1.0);
        LipschitzConstants {
            gain: sampled_sup(gain_reach, |s| self.gain.derivative(s).abs()),
            reaction: sampled_sup(reach, |s| self.reaction.d_state(s).abs()),
        }
    }

    /// `p Σⱼ wⱼ |uⱼ|^{p−1} sgn(uⱼ) F(u)ⱼ`, the discrete `d/dt ‖u‖_p^p`.
    pub fn lyapunov_derivative(&self, u: &StateField, p: f64) -> Result<f64> {
        let f = self.eval_rhs(u)?;
        let w = self.grid().weights();
        Ok(p * u
            .values()
            .iter()
            .zip(f.values())
            .zip(w)
            .map(|((&x, &fx), w)| {
                let sgn = if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let mag = if p == 1.0 { 1.0 } else { x.abs().powf(p - 1.0) };
                w * mag * sgn * fx
            })
            .sum::<f64>())
    }

    pub(crate) fn check_field(&self, u: &StateField) -> Result<()> {
        if u.grid().same_as(self.grid()) {
            Ok(())
        } else {
            Err(Error::Usage(
                "state field lives on a different grid than the model".into(),
            ))
        }
    }
}

/// Convenience assembly of a [`ModelSpec`] from parameter values.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    grid: Arc<Grid>,
    decay: DecaySpec,
    reaction: ReactionSpec,
    gain: GainSpec,
    kernel: KernelSource,
    p: f64,
    delta: f64,
    mu: f64,
    gradient_diagnostics: bool,
}

#[derive(Debug, Clone)]
enum KernelSource {
    Spec(KernelSpec, AssemblyOptions),
    Matrix(Arc<KernelMatrix>),
}

impl ModelBuilder {
    pub fn new(grid: Arc<Grid>) -> Self {
        Self {
            grid,
            decay: DecaySpec::Constant { h0: 1.0 },
            reaction: ReactionSpec::new(ReactionFamily::Zero, 0.1, 0.1),
            gain: GainSpec::new(GainFamily::Zero, 0.1, 0.1),
            kernel: KernelSource::Spec(KernelSpec::uniform(), AssemblyOptions::default()),
            p: 2.0,
            delta: 1.0,
            mu: 1.0,
            gradient_diagnostics: false,
        }
    }

    pub fn decay(mut self, decay: DecaySpec) -> Self {
        self.decay = decay;
        self
    }

    pub fn reaction(mut self, family: ReactionFamily, k_f: f64, c_f: f64) -> Self {
        self.reaction = ReactionSpec::new(family, k_f, c_f);
        self
    }

    pub fn gain(mut self, family: GainFamily, k_g: f64, c_g: f64) -> Self {
        self.gain = GainSpec::new(family, k_g, c_g);
        self
    }

    pub fn kernel(mut self, spec: KernelSpec) -> Self {
        self.kernel = KernelSource::Spec(spec, AssemblyOptions::default());
        self
    }

    pub fn kernel_with(mut self, spec: KernelSpec, options: AssemblyOptions) -> Self {
        self.kernel = KernelSource::Spec(spec, options);
        self
    }

    pub fn kernel_matrix(mut self, matrix: Arc<KernelMatrix>) -> Self {
        self.kernel = KernelSource::Matrix(matrix);
        self
    }

    pub fn p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn gradient_diagnostics(mut self, enabled: bool) -> Self {
        self.gradient_diagnostics = enabled;
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let kernel = match self.kernel {
            KernelSource::Matrix(m) => m,
            KernelSource::Spec(spec, mut options) => {
                spec.validate()?;
                options.with_derivatives |= self.gradient_diagnostics;
                Arc::new(KernelMatrix::assemble(
                    &spec,
                    Arc::clone(&self.grid),
                    options,
                )?)
            }
        };
        Ok(ModelSpec::new(
            self.decay,
            self.reaction,
            self.gain,
            kernel,
            LpSpace::new(self.p)?,
            self.delta,
            self.mu,
        )?
        .with_gradient_diagnostics(self.gradient_diagnostics))
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numerical(format!(
            "non-finite value {} at node {i}",
            values[i]
        ))),
    }
}

/// 100 points spread over the box: midpoints of a 100-cell (1D) or 10×10 (2D) lattice.
fn sample_points(grid: &Grid) -> Vec<Vec<f64>> {
    let per_axis = if grid.dimension() == 1 { SAMPLED_X } else { 10 };
    let lattice = Grid::new(grid.dimension(), grid.bounds(), per_axis)
        .expect("bounds already validated by the model grid");
    lattice.nodes().map(<[f64]>::to_vec).collect()
}

/// Zero plus 49 log-spaced magnitudes in [1e-3, 1e3] of each sign.
fn sample_states() -> Vec<f64> {
    let mut s = vec![0.0];
    for k in 0..=48 {
        let m = 10f64
            .powf(-3.0 + 6.0 * k as f64 / 48.0)
            .min(SAMPLE_STATE_RANGE);
        s.push(m);
        s.push(-m);
    }
    s
}

struct SampledWorst {
    lhs: f64,
    rhs: f64,
    x: Vec<f64>,
    s: f64,
}

fn worst_excess(
    xs: &[Vec<f64>],
    ss: &[f64],
    quantity: impl Fn(&[f64], f64) -> f64,
    bound: impl Fn(f64) -> f64,
) -> SampledWorst {
    let mut worst = SampledWorst {
        lhs: 0.0,
        rhs: f64::INFINITY,
        x: Vec::new(),
        s: 0.0,
    };
    let mut worst_gap = f64::INFINITY;
    for x in xs {
        for &s in ss {
            let (lhs, rhs) = (quantity(x, s), bound(s));
            let gap = rhs - lhs;
            if gap < worst_gap || gap.is_nan() {
                worst_gap = gap;
                worst = SampledWorst {
                    lhs,
                    rhs,
                    x: x.clone(),
                    s,
                };
            }
        }
    }
    worst
}

fn sampled_sup(reach: f64, f: impl Fn(f64) -> f64) -> f64 {
    let half = (LIPSCHITZ_SAMPLES / 2) as f64;
    (0..LIPSCHITZ_SAMPLES)
        .map(|k| f(reach * (k as f64 - half) / half))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize) -> Arc<Grid> {
        Arc::new(Grid::interval(0.0, 1.0, n).unwrap())
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
                0.05,
                0.6,
            )
            .gain(GainFamily::ScaledTanh { a: 0.4, b: 1.5 }, 0.05, 0.6)
            .kernel(KernelSpec::tent(0.2))
            .build()
            .unwrap()
    }

    #[test]
    fn absorbing_radius_arithmetic() {
        let m = ModelBuilder::new(unit(16))
            .decay(DecaySpec::Constant { h0: 2.0 })
            .reaction(ReactionFamily::Zero, 0.5, 0.5)
            .gain(GainFamily::Zero, 0.5, 0.5)
            .delta(0.1)
            .build()
            .unwrap();
        let c = m.validate().unwrap();
        assert_abs_diff_eq!(c.r_delta, 1.1, epsilon = 1e-14);
        assert_abs_diff_eq!(c.epsilon, 1.0);
    }

    #[test]
    fn decay_dominance_violation_is_named() {
        let m = ModelBuilder::new(unit(16))
            .decay(DecaySpec::Constant { h0: 1.0 })
            .reaction(ReactionFamily::Zero, 0.6, 0.1)
            .gain(GainFamily::Zero, 0.5, 0.1)
            .build()
            .unwrap();
        match m.validate() {
            Err(Error::Hypothesis { inequality, .. }) => assert_eq!(inequality, "k_f + k_g < h_0"),
            other => panic!("expected hypothesis error, got {other:?}"),
        }
        assert!(m.assess().constants.is_none());
    }

    #[test]
    fn decay_rate_with_unit_delta_and_epsilon() {
        let m = ModelBuilder::new(unit(8))
            .decay(DecaySpec::Constant { h0: 1.2 })
            .reaction(ReactionFamily::Zero, 0.1, 0.1)
            .gain(GainFamily::Zero, 0.1, 0.1)
            .delta(1.0)
            .p(3.0)
            .build()
            .unwrap();
        assert_abs_diff_eq!(m.validate().unwrap().norm_decay_rate, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gradient_rate_arithmetic() {
        let c = GradientConstants::new(1.0, 0.3, 1.0);
        assert_eq!(c.grad_decay_rate, 0.5);
        assert_abs_diff_eq!(c.grad_threshold, 0.6);
    }

    #[test]
    fn sampled_growth_violation_reports_a_witness() {
        let m = ModelBuilder::new(unit(8))
            .decay(DecaySpec::Constant { h0: 5.0 })
            .gain(GainFamily::Linear { gamma: 2.0 }, 1.0, 0.5)
            .build()
            .unwrap();
        let report = m.assess();
        let failed = report.first_failure().unwrap();
        assert_eq!(failed.name, "|g(s)| <= k_g|s| + c_g");
        assert_eq!(failed.witness.as_ref().unwrap().s.abs(), SAMPLE_STATE_RANGE);
        assert!(matches!(m.validate(), Err(Error::Hypothesis { .. })));
    }

    #[test]
    fn space_derivative_of_reaction_is_checked() {
        // |β′| = 2π·0.5 ≈ 3.14 exceeds c_f at s = 0
        let m = ModelBuilder::new(unit(8))
            .decay(DecaySpec::Constant { h0: 5.0 })
            .reaction(
                ReactionFamily::SaturatedAffine {
                    alpha: 0.0,
                    beta: 0.0,
                    beta_wave: 0.5,
                },
                0.1,
                1.0,
            )
            .build()
            .unwrap();
        let failed = m.assess().first_failure().cloned().unwrap();
        assert!(failed.name.starts_with("|d1 f(x,s)|"), "{}", failed.name);
    }

    #[test]
    fn validation_is_deterministic() {
        let m = nonlinear(unit(64));
        let a = m.assess();
        assert!(a.passed(), "{:?}", a.first_failure());
        assert_eq!(a, m.assess());
        assert_eq!(m.validate().unwrap(), m.validate().unwrap());
    }

    #[test]
    fn radius_is_linear_in_the_offsets() {
        let build = |c: f64| {
            ModelBuilder::new(unit(8))
                .decay(DecaySpec::Constant { h0: 1.0 })
                .reaction(ReactionFamily::Zero, 0.2, c)
                .gain(GainFamily::Zero, 0.2, 1.5 * c)
                .delta(0.3)
                .build()
                .unwrap()
                .validate()
                .unwrap()
                .r_delta
        };
        assert_abs_diff_eq!(build(0.4), 2.0 * build(0.2), epsilon = 1e-14);
    }

    #[test]
    fn gradient_diagnostics_require_slope_and_margin() {
        let base = ModelBuilder::new(unit(32))
            .reaction(ReactionFamily::Zero, 0.05, 0.05)
            .gain(GainFamily::Linear { gamma: 0.3 }, 0.3, 0.3)
            .kernel(KernelSpec::tent(0.25))
            .gradient_diagnostics(true);
        let flat = base
            .clone()
            .decay(DecaySpec::Constant { h0: 1.0 })
            .build()
            .unwrap();
        assert_eq!(
            flat.assess().first_failure().unwrap().name,
            "d_i h(x) >= h_1 > 0"
        );

        let ok = base
            .decay(DecaySpec::Affine { h0: 1.0, h1: 0.5 })
            .build()
            .unwrap();
        let c = ok.validate().unwrap();
        let g = c.gradient.unwrap();
        assert_abs_diff_eq!(
            g.grad_epsilon,
            1.0 - (0.05 * c.r_delta + 0.05),
            epsilon = 1e-14
        );
        // M from the published formula with p = 2, |Ω| = 1
        let dj = ok.kernel.derivative_p_norm(0, 2.0).unwrap();
        let r = c.r_delta;
        let expected_m = (r * dj * (0.3 * r + 0.3) + (0.05 * r + 0.05) + 2.0 * r * 2.0) / 2.0;
        assert_abs_diff_eq!(g.grad_bound_m, expected_m, epsilon = 1e-12);
        assert_abs_diff_eq!(g.grad_decay_rate, 0.5 * g.grad_epsilon, epsilon = 1e-15);
    }

    #[test]
    fn pure_decay_right_hand_side() {
        let g = unit(16);
        let m = ModelBuilder::new(g.clone()).build().unwrap();
        let f = m.eval_rhs(&StateField::constant(g, 3.0)).unwrap();
        assert!(f.values().iter().all(|&v| v == -3.0));
    }

    #[test]
    fn decay_cancels_gain_on_constants() {
        let g = unit(16);
        let m = ModelBuilder::new(g.clone())
            .decay(DecaySpec::Constant { h0: 1.0 })
            .gain(GainFamily::Linear { gamma: 1.0 }, 1.0, 0.1)
            .build()
            .unwrap();
        let f = m.eval_rhs(&StateField::constant(g, 2.0)).unwrap();
        for &v in f.values() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn odd_nonlinearities_vanish_at_the_origin() {
        let g = unit(16);
        let m = ModelBuilder::new(g.clone())
            .gain(GainFamily::Linear { gamma: 0.5 }, 0.5, 0.1)
            .reaction(
                ReactionFamily::SaturatedAffine {
                    alpha: 0.5,
                    beta: 0.0,
                    beta_wave: 0.0,
                },
                0.1,
                0.5,
            )
            .build()
            .unwrap();
        let f = m.eval_rhs(&StateField::zeros(g)).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_model_derivative_ignores_the_base_point() {
        let g = unit(32);
        let m = ModelBuilder::new(g.clone())
            .decay(DecaySpec::Affine { h0: 1.0, h1: 1.0 })
            .gain(GainFamily::Linear { gamma: 1.0 }, 1.0, 0.1)
            .kernel(KernelSpec::tent(0.3))
            .build()
            .unwrap();
        let v = StateField::from_fn(g.clone(), |x| (3.0 * x[0]).sin());
        let a = m
            .apply_derivative(&StateField::zeros(g.clone()), &v)
            .unwrap();
        let b = m
            .apply_derivative(&StateField::from_fn(g, |x| 5.0 * x[0]), &v)
            .unwrap();
        assert_eq!(a, b);
        let kv = m.kernel.apply(&v).unwrap();
        for ((a, kv), (h, v)) in a
            .values()
            .iter()
            .zip(kv.values())
            .zip(m.decay.values().iter().zip(v.values()))
        {
            assert_abs_diff_eq!(*a, -h * v + kv, epsilon = 1e-14);
        }
    }

    #[test]
    fn derivative_is_linear_in_direction() {
        let g = unit(16);
        let m = nonlinear(g.clone());
        let u = StateField::from_fn(g.clone(), |x| x[0] - 0.3);
        let d = m.apply_derivative(&u, &StateField::zeros(g)).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    fn all_families() -> Vec<(ReactionFamily, GainFamily)> {
        let reactions = [
            ReactionFamily::Zero,
            ReactionFamily::SaturatedAffine {
                alpha: 0.3,
                beta: 0.2,
                beta_wave: 0.05,
            },
            ReactionFamily::LinearSaturated {
                a: 0.4,
                beta: -0.1,
                beta_wave: 0.02,
            },
        ];
        let gains = [
            GainFamily::Zero,
            GainFamily::Linear { gamma: 0.3 },
            GainFamily::ScaledTanh { a: 0.5, b: 2.0 },
        ];
        reactions
            .iter()
            .flat_map(|r| gains.iter().map(move |g| (*r, *g)))
            .collect()
    }

    #[test]
    fn derivative_matches_central_differences() {
        let g = unit(64);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (reaction, gain) in all_families() {
            let m = ModelBuilder::new(g.clone())
                .decay(DecaySpec::Affine { h0: 1.0, h1: 0.3 })
                .reaction(reaction, 0.4, 1.0)
                .gain(gain, 0.3, 1.0)
                .kernel(KernelSpec::truncated_gaussian(0.1))
                .build()
                .unwrap();
            for _ in 0..20 {
                let u: Vec<f64> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
                let v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
                let u = StateField::from_values(g.clone(), u).unwrap();
                let v = StateField::from_values(g.clone(), v).unwrap();
                let eps = 1e-5;
                let fp = m.eval_rhs(&u.axpy(eps, &v).unwrap()).unwrap();
                let fm = m.eval_rhs(&u.axpy(-eps, &v).unwrap()).unwrap();
                let fd = fp.sub(&fm).unwrap().scaled(0.5 / eps);
                let an = m.apply_derivative(&u, &v).unwrap();
                let l2 = LpSpace::new(2.0).unwrap();
                let rel = fd.distance(&an, l2).unwrap() / an.lp_norm(l2);
                assert!(rel <= 1e-6, "{reaction:?}/{gain:?}: {rel}");
            }
        }
    }

    #[test]
    fn lipschitz_examples() {
        let g = unit(16);
        let linear = ModelBuilder::new(g.clone())
            .gain(GainFamily::Linear { gamma: 0.35 }, 0.35, 0.1)
            .build()
            .unwrap();
        assert_eq!(linear.lipschitz_estimate(2.0).gain, 0.35);

        let m = ModelBuilder::new(g)
            .gain(GainFamily::ScaledTanh { a: 0.4, b: 1.5 }, 0.1, 0.6)
            .reaction(
                ReactionFamily::SaturatedAffine {
                    alpha: 0.3,
                    beta: 0.2,
                    beta_wave: 0.0,
                },
                0.1,
                0.5,
            )
            .build()
            .unwrap();
        let l = m.lipschitz_estimate(3.0);
        assert_abs_diff_eq!(l.gain, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(l.reaction, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn mismatched_fields_are_rejected() {
        let m = nonlinear(unit(16));
        assert!(matches!(
            m.eval_rhs(&StateField::zeros(unit(8))),
            Err(Error::Usage(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lyapunov_derivative_contracts_outside_the_ball(
            raw in prop::collection::vec(-1.0f64..1.0, 64),
            scale in 1.0f64..20.0,
            p in prop::sample::select(vec![1.0, 1.5, 2.0, 4.0]),
        ) {
            prop_assume!(raw.iter().any(|v| v.abs() > 1e-3));
            let g = unit(64);
            let mut m = nonlinear(g.clone());
            m.space = LpSpace::new(p).unwrap();
            let c = m.validate().unwrap();
            let u = StateField::from_values(g, raw).unwrap();
            let u = u.scaled(scale * c.r_delta / u.lp_norm(m.space));
            let norm = u.lp_norm(m.space);
            let d = m.lyapunov_derivative(&u, p).unwrap();
            let bound = -c.norm_decay_rate * p * norm.powf(p);
            prop_assert!(d <= bound + 1e-9 * norm.powf(p), "{} > {}", d, bound);
        }
    }
}
