//! Residual variance and degrees of freedom for a linear smoother.
//!
//! With `B = I - H` over the masked pixels and `L = B'B`, the residual sum
//! of squares is a quadratic form with mean `sigma^2 tr(L)`. Matching the
//! first two moments with a scaled chi-square gives
//! `nu = tr(L)^2 / tr(L^2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::smooth::{LinearSmoother, SmoothResult};
use super::StatsError;
use crate::numeric::pairwise_sum;

pub const DEFAULT_EXACT_THRESHOLD: usize = 4096;
pub const DEFAULT_PROBES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfMethod {
    #[default]
    TwoMoment,
    NaiveNminus6,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DfOptions {
    pub method: DfMethod,
    /// Largest masked-pixel count for which `tr(L^2)` is computed exactly.
    pub exact_threshold: usize,
    pub probes: usize,
    pub seed: u64,
}

impl Default for DfOptions {
    fn default() -> Self {
        Self {
            method: DfMethod::TwoMoment,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            probes: DEFAULT_PROBES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceMethod {
    Exact,
    Hutchinson,
}

/// Operator-level quantities shared by every frame smoothed with the same
/// hat matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DfMoments {
    pub n: usize,
    pub delta1: f64,
    /// `None` for the naive method, which does not need it.
    pub delta2: Option<f64>,
    pub trace_method: Option<TraceMethod>,
    pub nu: f64,
    pub method: DfMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DfEstimate {
    pub sigma_hat: f64,
    pub delta1: f64,
    pub delta2: Option<f64>,
    pub nu: f64,
    pub method: DfMethod,
}

/// `tr(L)` from the hat-matrix traces.
pub fn delta1(n: usize, tr_h: f64, tr_hht: f64) -> f64 {
    n as f64 - 2.0 * tr_h + tr_hht
}

/// Rows of `B = I - H`, each paired with the span of its non-zero columns.
fn residual_rows(op: &dyn LinearSmoother) -> Vec<(usize, usize, Vec<f64>)> {
    (0..op.dim())
        .into_par_iter()
        .map(|i| {
            let mut row = op.dense_row(i);
            for v in row.iter_mut() {
                *v = -*v;
            }
            row[i] += 1.0;
            let lo = row.iter().position(|&v| v != 0.0).unwrap_or(i);
            let hi = row.iter().rposition(|&v| v != 0.0).map_or(i + 1, |p| p + 1);
            (lo, hi, row)
        })
        .collect()
}

/// `tr(L^2) = ||B B'||_F^2`, assembled row by row.
pub fn exact_delta2(op: &dyn LinearSmoother) -> f64 {
    let rows = residual_rows(op);
    let n = rows.len();
    let row_sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (lo_i, hi_i, ref bi) = rows[i];
            let terms: Vec<f64> = (0..n)
                .map(|j| {
                    let (lo_j, hi_j, ref bj) = rows[j];
                    let (lo, hi) = (lo_i.max(lo_j), hi_i.min(hi_j));
                    if lo >= hi {
                        return 0.0;
                    }
                    let g: f64 = bi[lo..hi].iter().zip(&bj[lo..hi]).map(|(a, b)| a * b).sum();
                    g * g
                })
                .collect();
            pairwise_sum(&terms)
        })
        .collect();
    pairwise_sum(&row_sums)
}

/// Hutchinson estimate of `tr(L^2)` with Rademacher probes:
/// the mean of `||B'B z||^2`.
pub fn hutchinson_delta2(op: &dyn LinearSmoother, probes: usize, seed: u64) -> f64 {
    let n = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut estimates = Vec::with_capacity(probes);
    for _ in 0..probes {
        let z: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let hz = op.apply(&z);
        let bz: Vec<f64> = z.iter().zip(&hz).map(|(a, b)| a - b).collect();
        let htbz = op.apply_transpose(&bz);
        let lz: Vec<f64> = bz.iter().zip(&htbz).map(|(a, b)| (a - b) * (a - b)).collect();
        estimates.push(pairwise_sum(&lz));
    }
    pairwise_sum(&estimates) / probes.max(1) as f64
}

/// Degrees of freedom for the operator; independent of the data.
pub fn df_moments(op: &dyn LinearSmoother, tr_h: f64, tr_hht: f64, opts: &DfOptions) -> Result<DfMoments, StatsError> {
    let n = op.dim();
    if n < 7 {
        return Err(StatsError::InsufficientPixels(n));
    }
    let d1 = delta1(n, tr_h, tr_hht);
    if !(d1 > 0.0) {
        return Err(StatsError::NonPositiveDf { delta1: d1, delta2: None });
    }
    match opts.method {
        DfMethod::NaiveNminus6 => Ok(DfMoments {
            n,
            delta1: d1,
            delta2: None,
            trace_method: None,
            nu: (n - 6) as f64,
            method: DfMethod::NaiveNminus6,
        }),
        DfMethod::TwoMoment => {
            let (d2, how) = if n <= opts.exact_threshold {
                (exact_delta2(op), TraceMethod::Exact)
            } else {
                (hutchinson_delta2(op, opts.probes, opts.seed), TraceMethod::Hutchinson)
            };
            if !(d2 > 0.0) {
                return Err(StatsError::NonPositiveDf { delta1: d1, delta2: Some(d2) });
            }
            Ok(DfMoments {
                n,
                delta1: d1,
                delta2: Some(d2),
                trace_method: Some(how),
                nu: d1 * d1 / d2,
                method: DfMethod::TwoMoment,
            })
        }
    }
}

/// Residual scale for one smoothed frame: `sigma_hat^2 = rss / delta1`.
pub fn estimate_df(sr: &SmoothResult, m: &DfMoments) -> DfEstimate {
    DfEstimate {
        sigma_hat: (sr.rss / m.delta1).sqrt(),
        delta1: m.delta1,
        delta2: m.delta2,
        nu: m.nu,
        method: m.method,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `H = 0`.
    struct Zero(usize);

    impl LinearSmoother for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn apply(&self, v: &[f64]) -> Vec<f64> {
            vec![0.0; v.len()]
        }
        fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
            vec![0.0; v.len()]
        }
        fn dense_row(&self, _: usize) -> Vec<f64> {
            vec![0.0; self.0]
        }
    }

    /// `H = c I`.
    struct Scaled(usize, f64);

    impl LinearSmoother for Scaled {
        fn dim(&self) -> usize {
            self.0
        }
        fn apply(&self, v: &[f64]) -> Vec<f64> {
            v.iter().map(|x| self.1 * x).collect()
        }
        fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
            self.apply(v)
        }
        fn dense_row(&self, i: usize) -> Vec<f64> {
            let mut r = vec![0.0; self.0];
            r[i] = self.1;
            r
        }
    }

    #[test]
    fn zero_smoother_has_identity_residual() {
        let m = df_moments(&Zero(50), 0.0, 0.0, &DfOptions::default()).unwrap();
        assert_eq!(m.delta1, 50.0);
        assert_eq!(m.delta2, Some(50.0));
        assert_eq!(m.nu, 50.0);
        let h = hutchinson_delta2(&Zero(50), 8, 1);
        assert_eq!(h, 50.0);
    }

    #[test]
    fn naive_method_uses_n_minus_six() {
        let opts = DfOptions { method: DfMethod::NaiveNminus6, ..DfOptions::default() };
        let m = df_moments(&Zero(106), 0.0, 0.0, &opts).unwrap();
        assert_eq!(m.nu, 100.0);
        assert_eq!(m.delta2, None);
    }

    #[test]
    fn scaled_identity_traces() {
        // L = (1 - c)^2 I.
        let c = 0.25;
        let op = Scaled(20, c);
        let d2 = exact_delta2(&op);
        assert!((d2 - 20.0 * (1.0 - c).powi(4)).abs() < 1e-12);
        // Rademacher probes are exact on diagonal matrices.
        assert!((hutchinson_delta2(&op, 4, 9) - d2).abs() < 1e-12);
    }

    #[test]
    fn full_smoothing_has_no_df() {
        let r = df_moments(&Scaled(10, 1.0), 10.0, 10.0, &DfOptions::default());
        assert!(matches!(r, Err(StatsError::NonPositiveDf { .. })));
    }

    #[test]
    fn too_few_pixels() {
        assert!(matches!(
            df_moments(&Zero(6), 0.0, 0.0, &DfOptions::default()),
            Err(StatsError::InsufficientPixels(6))
        ));
    }
}
