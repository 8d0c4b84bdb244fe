//! Symmetric kernel families and the dense quadrature matrix of the
//! integral operator `(K u)(x) = ∫_Ω J(x,y) u(y) dy`.
//!
//! Mass of `J(x,·)` falling outside Ω is lost: rows are not renormalized
//! unless [`AssemblyOptions::renormalize_rows`] is set.

use std::io::{Read, Write};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{weighted_norm, Grid, LpSpace, StateField};

/// Slack allowed when checking the operator inequalities on discrete data.
pub const BOUND_SLACK_TOLERANCE: f64 = 1e-12;

/// Default cap on dense matrix entries (a 4096-node grid).
pub const DEFAULT_MAX_ENTRIES: usize = 4096 * 4096;

/// Row count above which matvecs and assembly fan out over rayon.
const PARALLEL_ROWS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    /// Constant on Ω × Ω.
    Uniform,
    /// `exp(−|x−y|²/2σ²)` cut off at `|x−y| = radius`.
    TruncatedGaussian { sigma: f64, radius: f64 },
    /// `max(0, 1 − |x−y|/radius)`.
    Tent { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the integral over ℝ^N, so `∫ J(x,·) = 1`.
    #[default]
    Global,
    None,
}

/// Anything that can be sampled into a [`KernelMatrix`].
pub trait KernelFunction: Send + Sync {
    fn value(&self, grid: &Grid, x: &[f64], y: &[f64]) -> f64;

    /// `∂J/∂x_axis` at `(x, y)`.
    fn gradient(&self, grid: &Grid, x: &[f64], y: &[f64], axis: usize) -> f64;

    fn label(&self) -> String;
}

/// An analytic kernel family with its normalization and an amplitude factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub normalization: Normalization,
    pub scale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        Self {
            family,
            normalization: Normalization::Global,
            scale: 1.0,
        }
    }

    pub fn uniform() -> Self {
        Self::new(KernelFamily::Uniform)
    }

    pub fn tent(radius: f64) -> Self {
        Self::new(KernelFamily::Tent { radius })
    }

    /// Gaussian truncated at four standard deviations.
    pub fn truncated_gaussian(sigma: f64) -> Self {
        Self::new(KernelFamily::TruncatedGaussian {
            sigma,
            radius: 4.0 * sigma,
        })
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Same family with every length parameter multiplied by `factor`.
    pub fn widened(mut self, factor: f64) -> Self {
        self.family = match self.family {
            KernelFamily::Uniform => KernelFamily::Uniform,
            KernelFamily::TruncatedGaussian { sigma, radius } => KernelFamily::TruncatedGaussian {
                sigma: sigma * factor,
                radius: radius * factor,
            },
            KernelFamily::Tent { radius } => KernelFamily::Tent {
                radius: radius * factor,
            },
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "kernel {name} must be positive, got {v}"
                )))
            }
        };
        match self.family {
            KernelFamily::Uniform => {}
            KernelFamily::TruncatedGaussian { sigma, radius } => {
                positive("sigma", sigma)?;
                positive("radius", radius)?;
            }
            KernelFamily::Tent { radius } => positive("radius", radius)?,
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::Config(format!(
                "kernel scale must be nonnegative, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Closed-form `∫_{ℝ^N} profile`, or `|Ω|` for the uniform family.
    pub fn normalizer(&self, grid: &Grid) -> f64 {
        if self.normalization == Normalization::None {
            return 1.0;
        }
        let two_d = grid.dimension() == 2;
        match self.family {
            KernelFamily::Uniform => grid.measure(),
            KernelFamily::Tent { radius } => {
                if two_d {
                    std::f64::consts::PI * radius * radius / 3.0
                } else {
                    radius
                }
            }
            KernelFamily::TruncatedGaussian { sigma, radius } => {
                let q = radius / sigma;
                if two_d {
                    2.0 * std::f64::consts::PI * sigma * sigma * (1.0 - (-0.5 * q * q).exp())
                } else {
                    sigma
                        * (2.0 * std::f64::consts::PI).sqrt()
                        * libm::erf(q / std::f64::consts::SQRT_2)
                }
            }
        }
    }

    fn profile(&self, r2: f64) -> f64 {
        match self.family {
            KernelFamily::Uniform => 1.0,
            KernelFamily::Tent { radius } => (1.0 - r2.sqrt() / radius).max(0.0),
            KernelFamily::TruncatedGaussian { sigma, radius } => {
                if r2 <= radius * radius {
                    (-0.5 * r2 / (sigma * sigma)).exp()
                } else {
                    0.0
                }
            }
        }
    }

    /// `∂profile/∂x_axis` given `d = x − y`.
    fn profile_gradient(&self, d: &[f64], axis: usize) -> f64 {
        let r2: f64 = d.iter().map(|v| v * v).sum();
        match self.family {
            KernelFamily::Uniform => 0.0,
            KernelFamily::Tent { radius } => {
                let r = r2.sqrt();
                if r == 0.0 || r >= radius {
                    0.0
                } else {
                    -d[axis] / (r * radius)
                }
            }
            KernelFamily::TruncatedGaussian { sigma, radius } => {
                if r2 <= radius * radius {
                    -d[axis] / (sigma * sigma) * (-0.5 * r2 / (sigma * sigma)).exp()
                } else {
                    0.0
                }
            }
        }
    }
}

fn difference(x: &[f64], y: &[f64]) -> ([f64; 2], usize) {
    let mut d = [0.0; 2];
    for (k, (a, b)) in x.iter().zip(y).enumerate() {
        d[k] = a - b;
    }
    (d, x.len())
}

impl KernelFunction for KernelSpec {
    fn value(&self, grid: &Grid, x: &[f64], y: &[f64]) -> f64 {
        let (d, n) = difference(x, y);
        let r2: f64 = d[..n].iter().map(|v| v * v).sum();
        self.scale * self.profile(r2) / self.normalizer(grid)
    }

    fn gradient(&self, grid: &Grid, x: &[f64], y: &[f64], axis: usize) -> f64 {
        let (d, n) = difference(x, y);
        self.scale * self.profile_gradient(&d[..n], axis) / self.normalizer(grid)
    }

    fn label(&self) -> String {
        let family = match self.family {
            KernelFamily::Uniform => "uniform".to_string(),
            KernelFamily::TruncatedGaussian { sigma, radius } => {
                format!("truncated_gaussian(sigma={sigma},radius={radius})")
            }
            KernelFamily::Tent { radius } => format!("tent(radius={radius})"),
        };
        if self.scale == 1.0 {
            family
        } else {
            format!("{}*{family}", self.scale)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssemblyOptions {
    pub with_derivatives: bool,
    pub renormalize_rows: bool,
    pub max_entries: usize,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            with_derivatives: false,
            renormalize_rows: false,
            max_entries: DEFAULT_MAX_ENTRIES,
        }
    }
}

impl AssemblyOptions {
    pub fn with_derivatives() -> Self {
        Self {
            with_derivatives: true,
            ..Self::default()
        }
    }
}

/// Pass/fail of one discrete inequality `lhs ≤ rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

impl BoundCheck {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        let slack = rhs - lhs;
        Self {
            lhs,
            rhs,
            slack,
            holds: slack >= -BOUND_SLACK_TOLERANCE,
        }
    }
}

/// The three operator estimates evaluated on one `(K, u, p)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatorBoundsReport {
    pub p: f64,
    /// `|K u(x)| ≤ ‖J‖_{p′} ‖u‖_p` for every node.
    pub pointwise: BoundCheck,
    /// `‖K u‖_p ≤ ‖J‖_1 ‖u‖_p`.
    pub young: BoundCheck,
    /// `‖K u‖_p ≤ ‖J‖_p ‖u‖_1`.
    pub from_l1: BoundCheck,
}

impl OperatorBoundsReport {
    pub fn all_hold(&self) -> bool {
        self.pointwise.holds && self.young.holds && self.from_l1.holds
    }

    pub fn min_slack(&self) -> f64 {
        self.pointwise
            .slack
            .min(self.young.slack)
            .min(self.from_l1.slack)
    }
}

/// Dense quadrature matrix `entries[i][j] = J(x_i, x_j)` on a single grid.
#[derive(Debug)]
pub struct KernelMatrix {
    grid: Arc<Grid>,
    label: String,
    entries: Vec<f64>,
    derivatives: Option<Vec<Vec<f64>>>,
    norm_cache: Mutex<Vec<(u64, f64)>>,
}

impl Clone for KernelMatrix {
    fn clone(&self) -> Self {
        Self {
            grid: Arc::clone(&self.grid),
            label: self.label.clone(),
            entries: self.entries.clone(),
            derivatives: self.derivatives.clone(),
            norm_cache: Mutex::new(self.norm_cache.lock().expect("norm cache poisoned").clone()),
        }
    }
}

impl KernelMatrix {
    pub fn assemble(
        kernel: &dyn KernelFunction,
        grid: Arc<Grid>,
        options: AssemblyOptions,
    ) -> Result<Self> {
        let n = grid.len();
        let blocks = if options.with_derivatives {
            1 + grid.dimension()
        } else {
            1
        };
        let needed = n
            .checked_mul(n)
            .and_then(|e| e.checked_mul(blocks))
            .unwrap_or(usize::MAX);
        if needed > options.max_entries {
            return Err(Error::Resource(format!(
                "kernel matrix needs {needed} entries, cap is {}",
                options.max_entries
            )));
        }

        // Entry (i, j) is always evaluated as J(x_min, x_max) so the matrix
        // is symmetric bit for bit.
        let mut entries = vec![0.0; n * n];
        let fill = |(i, row): (usize, &mut [f64])| {
            for (j, e) in row.iter_mut().enumerate() {
                let (a, b) = if i <= j { (i, j) } else { (j, i) };
                *e = kernel.value(&grid, grid.node(a), grid.node(b));
            }
        };
        if n >= PARALLEL_ROWS {
            entries.par_chunks_mut(n).enumerate().for_each(fill);
        } else {
            entries.chunks_mut(n).enumerate().for_each(fill);
        }

        let mut derivatives = options.with_derivatives.then(|| {
            (0..grid.dimension())
                .map(|axis| {
                    let mut d = vec![0.0; n * n];
                    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                        for (j, e) in row.iter_mut().enumerate() {
                            *e = kernel.gradient(&grid, grid.node(i), grid.node(j), axis);
                        }
                    });
                    d
                })
                .collect::<Vec<_>>()
        });

        if let Some(bad) = entries.iter().position(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::Numerical(format!(
                "kernel entry ({}, {}) = {} is not a finite nonnegative value",
                bad / n,
                bad % n,
                entries[bad]
            )));
        }

        let mut label = kernel.label();
        if options.renormalize_rows {
            label.push_str("+row_renormalized");
            let weights = grid.weights();
            for i in 0..n {
                let row = &mut entries[i * n..(i + 1) * n];
                let mass: f64 = row.iter().zip(weights).map(|(e, w)| e * w).sum();
                if mass > 0.0 {
                    row.iter_mut().for_each(|e| *e /= mass);
                    if let Some(ds) = derivatives.as_mut() {
                        for d in ds.iter_mut() {
                            d[i * n..(i + 1) * n].iter_mut().for_each(|e| *e /= mass);
                        }
                    }
                }
            }
        }

        Ok(Self {
            grid,
            label,
            entries,
            derivatives,
            norm_cache: Mutex::new(Vec::new()),
        })
    }

    /// Wraps an explicit row-major matrix.
    pub fn from_entries(
        grid: Arc<Grid>,
        entries: Vec<f64>,
        label: impl Into<String>,
    ) -> Result<Self> {
        let n = grid.len();
        if entries.len() != n * n {
            return Err(Error::Usage(format!(
                "expected {} entries for a {n}-node grid, got {}",
                n * n,
                entries.len()
            )));
        }
        Ok(Self {
            grid,
            label: label.into(),
            entries,
            derivatives: None,
            norm_cache: Mutex::new(Vec::new()),
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn size(&self) -> usize {
        self.grid.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.size();
        &self.entries[i * n..(i + 1) * n]
    }

    pub fn has_derivatives(&self) -> bool {
        self.derivatives.is_some()
    }

    pub fn derivative_entries(&self, axis: usize) -> Option<&[f64]> {
        self.derivatives
            .as_ref()
            .and_then(|d| d.get(axis))
            .map(Vec::as_slice)
    }

    /// `factor · J`, dropping derivative matrices' cache but keeping them scaled.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: Arc::clone(&self.grid),
            label: format!("{factor}*{}", self.label),
            entries: self.entries.iter().map(|e| e * factor).collect(),
            derivatives: self.derivatives.as_ref().map(|ds| {
                ds.iter()
                    .map(|d| d.iter().map(|e| e * factor).collect())
                    .collect()
            }),
            norm_cache: Mutex::new(Vec::new()),
        }
    }

    /// Quadrature row masses `Σⱼ wⱼ J(xᵢ, yⱼ)`.
    pub fn row_sums(&self) -> Vec<f64> {
        let w = self.grid.weights();
        self.entries
            .chunks_exact(self.size())
            .map(|row| row.iter().zip(w).map(|(e, w)| e * w).sum())
            .collect()
    }

    pub fn apply(&self, u: &StateField) -> Result<StateField> {
        self.check_grid(u.grid())?;
        let mut out = vec![0.0; self.size()];
        self.apply_into(u.values(), &mut out);
        Ok(StateField::from_parts(Arc::clone(&self.grid), out))
    }

    /// Raw matvec on node values; `out[i] = Σⱼ wⱼ J(xᵢ,xⱼ) u[j]`.
    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        apply_dense(&self.entries, self.grid.weights(), u, out);
    }

    /// `K_{∂J}` applied along `axis`, when derivative matrices were assembled.
    pub fn apply_derivative_into(&self, axis: usize, u: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self
            .derivative_entries(axis)
            .ok_or_else(|| Error::Usage("kernel assembled without derivative matrices".into()))?;
        apply_dense(d, self.grid.weights(), u, out);
        Ok(())
    }

    /// `sup_x ‖J(x,·)‖_{L^p(Ω)}` as a max over rows; `p = ∞` gives the max entry.
    pub fn p_norm(&self, p: f64) -> f64 {
        let key = p.to_bits();
        if let Some(&(_, v)) = self
            .norm_cache
            .lock()
            .expect("norm cache poisoned")
            .iter()
            .find(|(k, _)| *k == key)
        {
            return v;
        }
        let v = row_norm_max(&self.entries, self.grid.weights(), p);
        self.norm_cache
            .lock()
            .expect("norm cache poisoned")
            .push((key, v));
        v
    }

    /// `sup_x ‖∂_{x_axis} J(x,·)‖_{L^p(Ω)}`.
    pub fn derivative_p_norm(&self, axis: usize, p: f64) -> Option<f64> {
        self.derivative_entries(axis)
            .map(|d| row_norm_max(d, self.grid.weights(), p))
    }

    /// `maxᵢ Σⱼ wⱼ |a(i,j) − b(i,j)|`, the sup-over-rows L¹ distance.
    pub fn l1_distance(&self, other: &KernelMatrix) -> Result<f64> {
        self.check_grid(&other.grid)?;
        let n = self.size();
        let w = self.grid.weights();
        Ok(self
            .entries
            .chunks_exact(n)
            .zip(other.entries.chunks_exact(n))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .zip(w)
                    .map(|((x, y), w)| w * (x - y).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max))
    }

    pub fn verify_operator_bounds(&self, u: &StateField, p: f64) -> Result<OperatorBoundsReport> {
        let space = LpSpace::new(p)?;
        let ku = self.apply(u)?;
        let u_p = u.lp_norm(space);
        let u_1 = weighted_norm(self.grid.weights(), u.values(), 1.0);
        let ku_p = ku.lp_norm(space);
        Ok(OperatorBoundsReport {
            p,
            pointwise: BoundCheck::new(ku.sup_norm(), self.p_norm(space.conjugate()) * u_p),
            young: BoundCheck::new(ku_p, self.p_norm(1.0) * u_p),
            from_l1: BoundCheck::new(ku_p, self.p_norm(p) * u_1),
        })
    }

    /// Flat binary dump: rows and columns as little-endian `u64`, then the
    /// row-major entries as little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.size() as u64;
        out.write_all(&n.to_le_bytes())?;
        out.write_all(&n.to_le_bytes())?;
        for e in &self.entries {
            out.write_all(&e.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump produced by [`write_binary`](Self::write_binary) back onto `grid`.
    pub fn read_binary<R: Read>(grid: Arc<Grid>, mut input: R) -> Result<Self> {
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let cols = u64::from_le_bytes(word) as usize;
        if rows != grid.len() || cols != grid.len() {
            return Err(Error::Usage(format!(
                "dump is {rows}x{cols}, grid has {} nodes",
                grid.len()
            )));
        }
        let mut entries = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            input.read_exact(&mut word)?;
            entries.push(f64::from_le_bytes(word));
        }
        Self::from_entries(grid, entries, "binary dump")
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        if self.grid.same_as(grid) {
            Ok(())
        } else {
            Err(Error::Usage(
                "kernel matrix and field live on different grids".into(),
            ))
        }
    }
}

fn row_norm_max(entries: &[f64], weights: &[f64], p: f64) -> f64 {
    entries
        .chunks_exact(weights.len())
        .map(|row| weighted_norm(weights, row, p))
        .fold(0.0, f64::max)
}

fn apply_dense(entries: &[f64], weights: &[f64], u: &[f64], out: &mut [f64]) {
    let n = weights.len();
    debug_assert_eq!(u.len(), n);
    debug_assert_eq!(out.len(), n);
    let wu: Vec<f64> = weights.iter().zip(u).map(|(w, v)| w * v).collect();
    let row_dot = |(o, row): (&mut f64, &[f64])| {
        *o = row.iter().zip(&wu).map(|(e, v)| e * v).sum();
    };
    if n >= PARALLEL_ROWS {
        out.par_iter_mut()
            .zip(entries.par_chunks_exact(n))
            .for_each(row_dot);
    } else {
        out.iter_mut()
            .zip(entries.chunks_exact(n))
            .for_each(row_dot);
    }
}
