//! Local quadratic regression on a pixel grid.
//!
//! At a target pixel the fit uses the basis
//! `{1, u1, u2, u1^2/2, u2^2/2, u1*u2}` with `u1 = dcol / h1` and
//! `u2 = drow / h2`, weighted by the product Gaussian kernel. Scaling the
//! offsets by the bandwidths leaves the intercept unchanged and keeps the
//! normal equations well conditioned. The estimate is the intercept, which
//! is linear in the data: `m_hat(s) = sum_j p_j(s) y_j`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::field::DiffField;
use super::StatsError;
use crate::numeric::{cholesky_solve, pairwise_sum};

/// Offsets beyond this many bandwidths carry no weight in truncated mode.
pub const TRUNCATION: f64 = 4.0;
const RANK_TOL: f64 = 1e-9;
const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    /// Column direction.
    pub h1: f64,
    /// Row direction.
    pub h2: f64,
}

impl Bandwidths {
    pub fn new(h1: f64, h2: f64) -> Result<Self, StatsError> {
        if !(h1 > 0.0 && h2 > 0.0 && h1.is_finite() && h2.is_finite()) {
            return Err(StatsError::InvalidArgument(format!("bandwidths must be positive, got ({h1}, {h2})")));
        }
        Ok(Self { h1, h2 })
    }

    pub fn isotropic(h: f64) -> Result<Self, StatsError> {
        Self::new(h, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSupport {
    /// Neighbours within `TRUNCATION` bandwidths in each direction.
    #[default]
    Truncated,
    /// Every pixel of the grid.
    Exact,
}

/// Separable kernel tables and window geometry.
#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    h: Bandwidths,
    half_rows: usize,
    half_cols: usize,
    w_rows: Vec<f64>,
    w_cols: Vec<f64>,
}

impl Kernel {
    pub(crate) fn new(h: Bandwidths, support: KernelSupport, (rows, cols): (usize, usize)) -> Self {
        let (half_rows, half_cols) = match support {
            KernelSupport::Truncated => (
                ((TRUNCATION * h.h2).floor() as usize).min(rows - 1),
                ((TRUNCATION * h.h1).floor() as usize).min(cols - 1),
            ),
            KernelSupport::Exact => (rows - 1, cols - 1),
        };
        let table = |half: usize, bw: f64| (0..=half).map(|d| (-0.5 * (d as f64 / bw).powi(2)).exp()).collect();
        Self {
            h,
            half_rows,
            half_cols,
            w_rows: table(half_rows, h.h2),
            w_cols: table(half_cols, h.h1),
        }
    }

    /// Window `(r0, r1, c0, c1)`, half-open, around `(r, c)` clipped to the grid.
    pub(crate) fn window(&self, r: usize, c: usize, (rows, cols): (usize, usize)) -> (usize, usize, usize, usize) {
        (
            r.saturating_sub(self.half_rows),
            (r + self.half_rows + 1).min(rows),
            c.saturating_sub(self.half_cols),
            (c + self.half_cols + 1).min(cols),
        )
    }

    #[inline]
    pub(crate) fn weight(&self, dr: usize, dc: usize) -> f64 {
        self.w_rows[dr] * self.w_cols[dc]
    }

    #[inline]
    pub(crate) fn basis(&self, dr: isize, dc: isize) -> [f64; 6] {
        let u1 = dc as f64 / self.h.h1;
        let u2 = dr as f64 / self.h.h2;
        [1.0, u1, u2, 0.5 * u1 * u1, 0.5 * u2 * u2, u1 * u2]
    }
}

/// Accumulated normal equations of one local fit.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Moments {
    pub(crate) m: [[f64; 6]; 6],
    pub(crate) b: [f64; 6],
}

impl Moments {
    #[inline]
    pub(crate) fn add(&mut self, w: f64, x: &[f64; 6], y: f64) {
        for i in 0..6 {
            let wx = w * x[i];
            for j in 0..=i {
                self.m[i][j] += wx * x[j];
            }
            self.b[i] += wx * y;
        }
    }

    #[inline]
    pub(crate) fn sub(&mut self, w: f64, x: &[f64; 6], y: f64) {
        self.add(-w, x, y);
    }

    /// `(M^-1 e1)`, or `None` when the local design is rank deficient.
    pub(crate) fn intercept_row(&self) -> Option<[f64; 6]> {
        let mut e1 = [0.0; 6];
        e1[0] = 1.0;
        cholesky_solve(&self.m, &e1, RANK_TOL)
    }

    /// Fitted intercept, falling back to the kernel-weighted mean.
    pub(crate) fn intercept(&self) -> (f64, bool) {
        match self.intercept_row() {
            Some(a) => ((0..6).map(|i| a[i] * self.b[i]).sum(), false),
            None if self.m[0][0] > 0.0 => (self.b[0] / self.m[0][0], true),
            None => (0.0, true),
        }
    }
}

/// One row of the hat matrix, stored over the kernel window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HatRow {
    pub r0: usize,
    pub c0: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major over the window; zero at unobserved pixels.
    pub weights: Vec<f64>,
    /// The local quadratic design was singular and a local constant was used.
    pub fallback: bool,
}

/// Hat rows for every masked pixel of a grid.
#[derive(Debug, Clone)]
pub struct HatOperator {
    rows: usize,
    cols: usize,
    bandwidths: Bandwidths,
    targets: Vec<usize>,
    target_of: Vec<usize>,
    hat: Vec<HatRow>,
}

fn hat_row(kernel: &Kernel, shape: (usize, usize), observed: &[bool], r: usize, c: usize) -> HatRow {
    let cols = shape.1;
    let (r0, r1, c0, c1) = kernel.window(r, c, shape);
    let mut mom = Moments::default();
    for i in r0..r1 {
        for j in c0..c1 {
            if observed[i * cols + j] {
                let x = kernel.basis(i as isize - r as isize, j as isize - c as isize);
                mom.add(kernel.weight(i.abs_diff(r), j.abs_diff(c)), &x, 0.0);
            }
        }
    }
    let (height, width) = (r1 - r0, c1 - c0);
    let mut weights = vec![0.0; height * width];
    let a = mom.intercept_row();
    for i in r0..r1 {
        for j in c0..c1 {
            if observed[i * cols + j] {
                let w = kernel.weight(i.abs_diff(r), j.abs_diff(c));
                weights[(i - r0) * width + (j - c0)] = match a {
                    Some(a) => {
                        let x = kernel.basis(i as isize - r as isize, j as isize - c as isize);
                        w * (0..6).map(|k| x[k] * a[k]).sum::<f64>()
                    }
                    None => w / mom.m[0][0],
                };
            }
        }
    }
    HatRow {
        r0,
        c0,
        height,
        width,
        weights,
        fallback: a.is_none(),
    }
}

impl HatOperator {
    pub fn new(
        shape: (usize, usize),
        mask: &[bool],
        observed: &[bool],
        h: Bandwidths,
        support: KernelSupport,
    ) -> Result<Self, StatsError> {
        let (rows, cols) = shape;
        if mask.len() != rows * cols || observed.len() != rows * cols {
            return Err(StatsError::InvalidArgument("mask size does not match grid".into()));
        }
        if mask.iter().zip(observed).any(|(&m, &o)| m && !o) {
            return Err(StatsError::InvalidArgument("masked pixels must be observed".into()));
        }
        let kernel = Kernel::new(h, support, shape);
        let targets: Vec<usize> = (0..rows * cols).filter(|&k| mask[k]).collect();
        if targets.is_empty() {
            return Err(StatsError::InvalidArgument("no masked pixels".into()));
        }
        let mut target_of = vec![NONE; rows * cols];
        for (t, &k) in targets.iter().enumerate() {
            target_of[k] = t;
        }
        let hat: Vec<HatRow> = targets
            .par_iter()
            .map(|&k| hat_row(&kernel, shape, observed, k / cols, k % cols))
            .collect();
        let fallbacks = hat.iter().filter(|h| h.fallback).count();
        if fallbacks > 0 {
            log::warn!("{fallbacks} pixel(s) used a local constant fit");
        }
        Ok(Self {
            rows,
            cols,
            bandwidths: h,
            targets,
            target_of,
            hat,
        })
    }

    pub fn for_field(d: &DiffField, h: Bandwidths, support: KernelSupport) -> Result<Self, StatsError> {
        Self::new(d.shape(), &d.mask, &d.observed, h, support)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bandwidths(&self) -> Bandwidths {
        self.bandwidths
    }

    /// Number of masked pixels.
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Grid index of each masked pixel, in row-major order.
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn row(&self, t: usize) -> &HatRow {
        &self.hat[t]
    }

    pub fn fallback_pixels(&self) -> Vec<usize> {
        self.targets
            .iter()
            .zip(&self.hat)
            .filter(|(_, h)| h.fallback)
            .map(|(&k, _)| k)
            .collect()
    }

    /// Visits `(grid index, weight)` over the window of row `t`.
    fn for_each_weight(&self, t: usize, mut f: impl FnMut(usize, f64)) {
        let row = &self.hat[t];
        for i in 0..row.height {
            let base = (row.r0 + i) * self.cols + row.c0;
            for (j, &w) in row.weights[i * row.width..(i + 1) * row.width].iter().enumerate() {
                f(base + j, w);
            }
        }
    }

    fn dot_row(&self, t: usize, grid: &[f64]) -> f64 {
        let row = &self.hat[t];
        let mut acc = 0.0;
        for i in 0..row.height {
            let base = (row.r0 + i) * self.cols + row.c0;
            let y = &grid[base..base + row.width];
            let w = &row.weights[i * row.width..(i + 1) * row.width];
            acc += w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    }

    /// `m_hat` at every masked pixel for a full-grid data vector.
    pub fn apply_grid(&self, grid: &[f64]) -> Vec<f64> {
        assert_eq!(grid.len(), self.rows * self.cols);
        (0..self.len()).into_par_iter().map(|t| self.dot_row(t, grid)).collect()
    }

    /// `p_s(s)`.
    pub fn self_weight(&self, t: usize) -> f64 {
        let row = &self.hat[t];
        let k = self.targets[t];
        let (r, c) = (k / self.cols, k % self.cols);
        row.weights[(r - row.r0) * row.width + (c - row.c0)]
    }

    /// Norm of the hat row over masked columns.
    pub fn masked_norm(&self, t: usize) -> f64 {
        let mut sq = 0.0;
        self.for_each_weight(t, |k, w| {
            if self.target_of[k] != NONE {
                sq += w * w;
            }
        });
        sq.sqrt()
    }

    /// Runs the smoother on one field sharing this operator's grid and mask.
    pub fn smooth(&self, d: &DiffField) -> Result<SmoothResult, StatsError> {
        if d.shape() != self.shape() {
            return Err(StatsError::ShapeMismatch(d.shape(), self.shape()));
        }
        if d.mask.iter().zip(&self.target_of).any(|(&m, &t)| m != (t != NONE)) {
            return Err(StatsError::InvalidArgument("field mask differs from operator mask".into()));
        }
        let n = self.rows * self.cols;
        let fitted = self.apply_grid(&d.values);
        let stats: Vec<(f64, f64)> = (0..self.len())
            .into_par_iter()
            .map(|t| (self.self_weight(t), self.masked_norm(t)))
            .collect();
        let mut m_hat = vec![0.0; n];
        let mut hat_self = vec![0.0; n];
        let mut hat_norm = vec![0.0; n];
        let mut resid = Vec::with_capacity(self.len());
        for (t, &k) in self.targets.iter().enumerate() {
            m_hat[k] = fitted[t];
            hat_self[k] = stats[t].0;
            hat_norm[k] = stats[t].1;
            resid.push((d.values[k] - fitted[t]).powi(2));
        }
        let selfs: Vec<f64> = stats.iter().map(|s| s.0).collect();
        let norms_sq: Vec<f64> = stats.iter().map(|s| s.1 * s.1).collect();
        Ok(SmoothResult {
            rows: self.rows,
            cols: self.cols,
            n: self.len(),
            m_hat,
            hat_norm,
            hat_self,
            mask: d.mask.clone(),
            rss: pairwise_sum(&resid),
            tr_h: pairwise_sum(&selfs),
            tr_hht: pairwise_sum(&norms_sq),
            fallback_pixels: self.fallback_pixels(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothResult {
    pub rows: usize,
    pub cols: usize,
    /// Masked pixel count.
    pub n: usize,
    pub m_hat: Vec<f64>,
    pub hat_norm: Vec<f64>,
    pub hat_self: Vec<f64>,
    pub mask: Vec<bool>,
    pub rss: f64,
    pub tr_h: f64,
    pub tr_hht: f64,
    /// Grid indices where the local constant fallback was used.
    pub fallback_pixels: Vec<usize>,
}

/// Builds the operator for `d` and smooths it.
pub fn smooth_field(d: &DiffField, h: Bandwidths, support: KernelSupport) -> Result<SmoothResult, StatsError> {
    HatOperator::for_field(d, h, support)?.smooth(d)
}

/// Linear smoother restricted to the masked pixels, as used by the
/// degrees-of-freedom estimators.
pub trait LinearSmoother: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, v: &[f64]) -> Vec<f64>;
    fn dense_row(&self, i: usize) -> Vec<f64>;
}

impl LinearSmoother for HatOperator {
    fn dim(&self) -> usize {
        self.len()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut grid = vec![0.0; self.rows * self.cols];
        for (&k, &x) in self.targets.iter().zip(v) {
            grid[k] = x;
        }
        self.apply_grid(&grid)
    }

    fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (t, &x) in v.iter().enumerate() {
            self.for_each_weight(t, |k, w| {
                let j = self.target_of[k];
                if j != NONE {
                    out[j] += w * x;
                }
            });
        }
        out
    }

    fn dense_row(&self, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.for_each_weight(t, |k, w| {
            let j = self.target_of[k];
            if j != NONE {
                out[j] = w;
            }
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> DiffField {
        let values = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        DiffField::new(rows, cols, values, vec![true; rows * cols]).unwrap()
    }

    #[test]
    fn constant_field_is_reproduced() {
        let d = full(12, 10, |_, _| 3.25);
        let sr = smooth_field(&d, Bandwidths::isotropic(1.5).unwrap(), KernelSupport::Truncated).unwrap();
        for &v in &sr.m_hat {
            assert!((v - 3.25).abs() < 1e-10);
        }
        assert!(sr.rss < 1e-18);
    }

    #[test]
    fn quadratic_field_is_reproduced_at_borders() {
        let d = full(20, 20, |r, c| {
            let (x1, x2) = (c as f64, r as f64);
            2.0 * x1 * x1 - x1 * x2 + 3.0
        });
        let sr = smooth_field(&d, Bandwidths::new(2.0, 1.5).unwrap(), KernelSupport::Truncated).unwrap();
        for (a, b) in sr.m_hat.iter().zip(&d.values) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn hat_rows_sum_to_one() {
        let d = full(9, 11, |r, c| (r * c) as f64);
        let op = HatOperator::for_field(&d, Bandwidths::new(1.0, 2.0).unwrap(), KernelSupport::Truncated).unwrap();
        for t in 0..op.len() {
            let s: f64 = op.row(t).weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn self_weight_bounded_by_norm() {
        let d = full(8, 8, |r, c| (r + c) as f64);
        let sr = smooth_field(&d, Bandwidths::isotropic(1.0).unwrap(), KernelSupport::Truncated).unwrap();
        for (s, n) in sr.hat_self.iter().zip(&sr.hat_norm) {
            assert!(*n >= *s && *s >= 0.0);
        }
        let tr: f64 = sr.hat_self.iter().sum();
        assert!((tr - sr.tr_h).abs() < 1e-10);
    }

    #[test]
    fn sparse_neighbourhood_falls_back_to_constant() {
        // A single row cannot support the row-direction terms.
        let d = full(1, 12, |_, c| c as f64);
        let sr = smooth_field(&d, Bandwidths::isotropic(1.0).unwrap(), KernelSupport::Truncated).unwrap();
        assert_eq!(sr.fallback_pixels.len(), 12);
        assert!(sr.m_hat.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn padding_shrinks_border_estimates() {
        let d = full(10, 10, |_, _| 5.0);
        let p = super::super::field::pad_field(&d, 8);
        let sr = smooth_field(&p, Bandwidths::isotropic(2.0).unwrap(), KernelSupport::Truncated).unwrap();
        let at = |r: usize, c: usize| sr.m_hat[(r + 8) * p.cols + c + 8];
        for k in 0..10 {
            for (r, c) in [(0, k), (9, k), (k, 0), (k, 9)] {
                assert!(at(r, c).abs() < 5.0, "({r},{c}) {}", at(r, c));
            }
        }
        assert!(at(5, 5) > 0.0);
    }

    #[test]
    fn transpose_is_adjoint() {
        let d = full(7, 6, |_, _| 0.0);
        let op = HatOperator::for_field(&d, Bandwidths::isotropic(1.2).unwrap(), KernelSupport::Truncated).unwrap();
        let u: Vec<f64> = (0..42).map(|k| (k as f64 * 0.37).sin()).collect();
        let v: Vec<f64> = (0..42).map(|k| (k as f64 * 0.91).cos()).collect();
        let hu = op.apply(&u);
        let htv = op.apply_transpose(&v);
        let lhs: f64 = hu.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&htv).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_bandwidths() {
        assert!(Bandwidths::new(0.0, 1.0).is_err());
        assert!(Bandwidths::new(1.0, f64::NAN).is_err());
    }
}
