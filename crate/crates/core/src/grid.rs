//! Midpoint-rule discretization of box domains and the discrete norms used
//! by every estimate in the crate.
//!
//! Nodes are stored axis-0-fastest: in 2D the node with axis indices
//! `(i, j)` lives at `j * n + i`. All weights are equal to `|Ω| / N`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported spatial dimension. Dense kernel storage is O(N²).
pub const MAX_DIMENSION: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dimension: usize,
    bounds: Vec<(f64, f64)>,
    nodes_per_axis: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
    measure: f64,
}

impl Grid {
    /// Builds the composite midpoint tensor grid on the box `bounds`.
    pub fn new(dimension: usize, bounds: &[(f64, f64)], nodes_per_axis: usize) -> Result<Self> {
        if dimension == 0 || dimension > MAX_DIMENSION {
            return Err(Error::Config(format!(
                "grid dimension must be 1 or 2, got {dimension}"
            )));
        }
        if bounds.len() != dimension {
            return Err(Error::Config(format!(
                "expected {dimension} axis intervals, got {}",
                bounds.len()
            )));
        }
        if nodes_per_axis < 2 {
            return Err(Error::Config(format!(
                "nodes_per_axis must be at least 2, got {nodes_per_axis}"
            )));
        }
        for (axis, &(a, b)) in bounds.iter().enumerate() {
            if !(a.is_finite() && b.is_finite()) || a >= b {
                return Err(Error::Config(format!(
                    "degenerate interval [{a}, {b}] on axis {axis}"
                )));
            }
        }

        let node_count = nodes_per_axis.pow(dimension as u32);
        let measure: f64 = bounds.iter().map(|&(a, b)| b - a).product();
        let axis_points: Vec<Vec<f64>> = bounds
            .iter()
            .map(|&(a, b)| {
                let h = (b - a) / nodes_per_axis as f64;
                (0..nodes_per_axis)
                    .map(|i| a + (i as f64 + 0.5) * h)
                    .collect()
            })
            .collect();

        let mut coords = Vec::with_capacity(node_count * dimension);
        for node in 0..node_count {
            let mut rest = node;
            for points in &axis_points {
                coords.push(points[rest % nodes_per_axis]);
                rest /= nodes_per_axis;
            }
        }

        Ok(Self {
            dimension,
            bounds: bounds.to_vec(),
            nodes_per_axis,
            coords,
            weights: vec![measure / node_count as f64; node_count],
            measure,
        })
    }

    /// One-dimensional grid on `[a, b]`.
    pub fn interval(a: f64, b: f64, nodes: usize) -> Result<Self> {
        Self::new(1, &[(a, b)], nodes)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.nodes_per_axis
    }

    /// Number of quadrature nodes.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Coordinates of node `i`, one entry per axis.
    pub fn node(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dimension)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// |Ω|, the product of the side lengths.
    pub fn measure(&self) -> f64 {
        self.measure
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let (a, b) = self.bounds[axis];
        (b - a) / self.nodes_per_axis as f64
    }

    /// Distance in the flat index between neighbours along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.nodes_per_axis.pow(axis as u32)
    }

    /// Index of node `i` along `axis`.
    pub fn axis_index(&self, i: usize, axis: usize) -> usize {
        (i / self.stride(axis)) % self.nodes_per_axis
    }

    /// True when both grids discretize the same box with the same resolution.
    pub fn same_as(&self, other: &Grid) -> bool {
        std::ptr::eq(self, other)
            || (self.dimension == other.dimension
                && self.nodes_per_axis == other.nodes_per_axis
                && self.bounds == other.bounds)
    }
}

/// An exponent `p ∈ [1, ∞)` paired with its Hölder conjugate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpSpace {
    p: f64,
    p_conjugate: f64,
}

impl LpSpace {
    pub fn new(p: f64) -> Result<Self> {
        if !p.is_finite() || p < 1.0 {
            return Err(Error::Config(format!(
                "exponent p must lie in [1, ∞), got {p}"
            )));
        }
        let p_conjugate = if p == 1.0 {
            f64::INFINITY
        } else {
            p / (p - 1.0)
        };
        Ok(Self { p, p_conjugate })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn conjugate(&self) -> f64 {
        self.p_conjugate
    }
}

impl fmt::Display for LpSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L^{}", self.p)
    }
}

/// `(Σ wⱼ |vⱼ|^p)^{1/p}` for finite `p`, `max |vⱼ|` for `p = ∞`.
///
/// The reduction runs in index order so results are bit-reproducible.
pub fn weighted_norm(weights: &[f64], values: &[f64], p: f64) -> f64 {
    debug_assert_eq!(weights.len(), values.len());
    if p == f64::INFINITY {
        return values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    }
    let sum: f64 = if p == 1.0 {
        weights.iter().zip(values).map(|(w, v)| w * v.abs()).sum()
    } else if p == 2.0 {
        weights.iter().zip(values).map(|(w, v)| w * v * v).sum()
    } else {
        weights
            .iter()
            .zip(values)
            .map(|(w, v)| w * v.abs().powf(p))
            .sum()
    };
    if p == 1.0 {
        sum
    } else if p == 2.0 {
        sum.sqrt()
    } else {
        sum.powf(1.0 / p)
    }
}

/// A scalar field sampled at the nodes of a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl StateField {
    pub fn from_values(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Usage(format!(
                "field has {} values but the grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite field value {} at node {i}",
                values[i]
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = grid.nodes().map(f).collect();
        Self { grid, values }
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![c; n],
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn lp_norm(&self, space: LpSpace) -> f64 {
        weighted_norm(self.grid.weights(), &self.values, space.p())
    }

    /// Diagnostic sup-norm over node values.
    pub fn sup_norm(&self) -> f64 {
        weighted_norm(self.grid.weights(), &self.values, f64::INFINITY)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &StateField) -> Result<Self> {
        self.check_same_grid(other)?;
        Ok(Self {
            grid: Arc::clone(&self.grid),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &StateField) -> Result<Self> {
        self.axpy(-1.0, other)
    }

    /// `‖self − other‖_p` without materializing the difference.
    pub fn distance(&self, other: &StateField, space: LpSpace) -> Result<f64> {
        self.check_same_grid(other)?;
        let diff: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(weighted_norm(self.grid.weights(), &diff, space.p()))
    }

    /// One-sided forward differences along `axis`; the last node along the
    /// axis repeats its backward difference.
    pub fn gradient(&self, axis: usize) -> Result<Self> {
        let grid = &self.grid;
        if axis >= grid.dimension() {
            return Err(Error::Usage(format!(
                "axis {axis} out of range for a {}-dimensional grid",
                grid.dimension()
            )));
        }
        let n = grid.nodes_per_axis();
        let stride = grid.stride(axis);
        let inv_h = 1.0 / grid.spacing(axis);
        let values = (0..self.len())
            .map(|i| {
                let k = grid.axis_index(i, axis);
                let (lo, hi) = if k + 1 < n {
                    (i, i + stride)
                } else {
                    (i - stride, i)
                };
                (self.values[hi] - self.values[lo]) * inv_h
            })
            .collect();
        Ok(Self {
            grid: Arc::clone(grid),
            values,
        })
    }

    pub(crate) fn check_same_grid(&self, other: &StateField) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::Usage("fields live on different grids".into()))
        }
    }

    pub(crate) fn from_parts(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        Self { grid, values }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit(n: usize) -> Arc<Grid> {
        Arc::new(Grid::interval(0.0, 1.0, n).unwrap())
    }

    #[test]
    fn midpoint_nodes_in_one_dimension() {
        let g = Grid::interval(0.0, 1.0, 4).unwrap();
        let xs: Vec<f64> = g.nodes().map(|x| x[0]).collect();
        assert_eq!(xs, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(g.weights().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn measure_is_product_of_sides() {
        let g = Grid::interval(0.0, 2.0, 2).unwrap();
        assert_eq!(g.measure(), 2.0);
        assert!(g.weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn tensor_grid_in_two_dimensions() {
        let g = Grid::new(2, &[(0.0, 1.0), (0.0, 1.0)], 3).unwrap();
        assert_eq!(g.len(), 9);
        for &w in g.weights() {
            assert_abs_diff_eq!(w, 1.0 / 9.0, epsilon = 1e-15);
        }
        // axis 0 runs fastest
        assert_eq!(g.node(1), &[0.5, 1.0 / 6.0]);
        assert_eq!(g.node(3), &[1.0 / 6.0, 0.5]);
        assert_eq!(g.stride(1), 3);
        assert_eq!(g.axis_index(7, 1), 2);
    }

    #[test]
    fn weights_sum_to_measure() {
        let g = Grid::new(2, &[(-1.0, 2.0), (0.5, 1.25)], 64).unwrap();
        let total: f64 = g.weights().iter().sum();
        assert!(((total - g.measure()) / g.measure()).abs() < 1e-12);
        for (x, &(a, b)) in g.nodes().flat_map(|x| x.iter().zip(g.bounds())) {
            assert!(*x > a && *x < b);
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(Grid::interval(1.0, 1.0, 4), Err(Error::Config(_))));
        assert!(matches!(Grid::interval(2.0, 1.0, 4), Err(Error::Config(_))));
        assert!(matches!(Grid::interval(0.0, 1.0, 1), Err(Error::Config(_))));
        assert!(matches!(
            Grid::new(3, &[(0.0, 1.0); 3], 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conjugate_exponents() {
        assert_eq!(LpSpace::new(1.0).unwrap().conjugate(), f64::INFINITY);
        assert_eq!(LpSpace::new(2.0).unwrap().conjugate(), 2.0);
        assert_abs_diff_eq!(LpSpace::new(4.0).unwrap().conjugate(), 4.0 / 3.0);
        assert!(LpSpace::new(0.5).is_err());
        assert!(LpSpace::new(f64::INFINITY).is_err());
    }

    #[test]
    fn constant_and_zero_fields() {
        let g = unit(16);
        let two = StateField::constant(g.clone(), 2.0);
        assert_abs_diff_eq!(
            two.lp_norm(LpSpace::new(2.0).unwrap()),
            2.0,
            epsilon = 1e-15
        );
        let zero = StateField::zeros(g);
        for p in [1.0, 1.5, 2.0, 4.0] {
            assert_eq!(zero.lp_norm(LpSpace::new(p).unwrap()), 0.0);
        }
    }

    #[test]
    fn identity_field_l2_norm_converges_at_second_order() {
        // ∫₀¹ x² dx = 1/3
        let exact = (1.0_f64 / 3.0).sqrt();
        let l2 = LpSpace::new(2.0).unwrap();
        let errors: Vec<f64> = [16, 32, 64, 128]
            .iter()
            .map(|&n| (StateField::from_fn(unit(n), |x| x[0]).lp_norm(l2) - exact).abs())
            .collect();
        for pair in errors.windows(2) {
            let order = (pair[0] / pair[1]).log2();
            assert!((order - 2.0).abs() < 0.05, "order {order}");
        }
        assert!(errors[3] < 1.0 / (128.0 * 128.0));
    }

    #[test]
    fn gradient_of_constant_and_linear_fields() {
        let g = unit(32);
        let c = StateField::constant(g.clone(), 3.5).gradient(0).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));
        let lin = StateField::from_fn(g, |x| x[0]).gradient(0).unwrap();
        for &v in lin.values() {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_of_sine_within_taylor_bound() {
        let n = 256;
        let g = Arc::new(Grid::interval(0.0, std::f64::consts::PI, n).unwrap());
        let u = StateField::from_fn(g.clone(), |x| x[0].sin());
        let du = u.gradient(0).unwrap();
        let bound = 2.0 * std::f64::consts::PI / n as f64;
        for (x, d) in g.nodes().zip(du.values()) {
            assert!((d - x[0].cos()).abs() <= bound);
        }
    }

    #[test]
    fn gradient_along_second_axis() {
        let g = Arc::new(Grid::new(2, &[(0.0, 1.0), (0.0, 2.0)], 8).unwrap());
        let u = StateField::from_fn(g, |x| 3.0 * x[1] - x[0]);
        let dy = u.gradient(1).unwrap();
        let dx = u.gradient(0).unwrap();
        for (a, b) in dy.values().iter().zip(dx.values()) {
            assert_abs_diff_eq!(*a, 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(*b, -1.0, epsilon = 1e-12);
        }
        assert!(u.gradient(2).is_err());
    }

    #[test]
    fn mismatched_grids_are_usage_errors() {
        let a = StateField::zeros(unit(8));
        let b = StateField::zeros(unit(16));
        assert!(matches!(a.sub(&b), Err(Error::Usage(_))));
        assert!(StateField::from_values(unit(4), vec![0.0; 3]).is_err());
        assert!(StateField::from_values(unit(2), vec![0.0, f64::NAN]).is_err());
    }

    fn field_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn discrete_holder_inequality((u, v) in field_pair(), p in prop::sample::select(vec![1.0, 1.5, 2.0, 4.0])) {
            let g = unit(u.len());
            let w = g.weights();
            let space = LpSpace::new(p).unwrap();
            let lhs: f64 = w.iter().zip(u.iter().zip(&v)).map(|(w, (a, b))| w * (a * b).abs()).sum();
            let rhs = weighted_norm(w, &u, p) * weighted_norm(w, &v, space.conjugate());
            prop_assert!(lhs <= rhs + 1e-12 * (1.0 + rhs));
        }

        #[test]
        fn norm_is_absolutely_homogeneous((u, _v) in field_pair(), alpha in -5.0f64..5.0, p in 1.0f64..6.0) {
            let f = StateField::from_values(unit(u.len()), u).unwrap();
            let s = LpSpace::new(p).unwrap();
            let lhs = f.scaled(alpha).lp_norm(s);
            let rhs = alpha.abs() * f.lp_norm(s);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }

        #[test]
        fn norm_is_monotone_in_modulus((u, v) in field_pair(), p in 1.0f64..6.0) {
            let g = unit(u.len());
            // |small| ≤ |large| nodewise
            let small: Vec<f64> = u.iter().zip(&v).map(|(a, b)| if a.abs() <= b.abs() { *a } else { *b }).collect();
            let large: Vec<f64> = u.iter().zip(&v).map(|(a, b)| if a.abs() <= b.abs() { -*b } else { *a }).collect();
            let s = LpSpace::new(p).unwrap();
            let a = StateField::from_values(g.clone(), small).unwrap().lp_norm(s);
            let b = StateField::from_values(g, large).unwrap().lp_norm(s);
            prop_assert!(a <= b * (1.0 + 1e-14));
        }
    }
}
