//! Intensity segmentation: pixels at or below a cutoff `C` become background.
//!
//! The cutoff is either given by hand or placed at the valley of a Gaussian
//! mixture fitted to the pixel intensities, between the two lowest-mean
//! components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Frame, ModelError};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("need at least {needed} pixels for {groups} groups, got {got}")]
    InsufficientData { needed: usize, groups: usize, got: usize },
    #[error("mixture fit is degenerate: {0}")]
    DegenerateFit(String),
    #[error("no density valley between the two lowest modes; midpoint {suggestion} may serve as a cutoff")]
    NoValley { suggestion: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Number of mixture components, fixed or chosen by BIC over 2..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupCount {
    Fixed(usize),
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iter: 500,
            rel_tol: 1e-6,
            seed: 0,
        }
    }
}

/// A fitted one-dimensional Gaussian mixture, components sorted by mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
    pub loglik: f64,
    pub n: usize,
}

impl GmmModel {
    pub fn groups(&self) -> usize {
        self.means.len()
    }

    /// Mixture log-density at `y`, computed without underflow.
    pub fn log_density(&self, y: f64) -> f64 {
        let terms = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.stddevs)
            .map(|((&a, &m), &s)| log_component(y, a, m, s));
        log_sum_exp(terms)
    }

    pub fn density(&self, y: f64) -> f64 {
        self.log_density(y).exp()
    }

    pub fn bic(&self) -> f64 {
        let k = (3 * self.groups() - 1) as f64;
        -2.0 * self.loglik + k * (self.n as f64).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdOrigin {
    Auto,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub c: f64,
    pub origin: ThresholdOrigin,
}

impl Threshold {
    pub fn manual(c: f64) -> Self {
        Self {
            c,
            origin: ThresholdOrigin::Manual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_pixels: u64,
}

#[inline]
fn log_component(y: f64, weight: f64, mean: f64, sd: f64) -> f64 {
    let z = (y - mean) / sd;
    weight.ln() - sd.ln() - LN_SQRT_2PI - 0.5 * z * z
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// One EM run. Returns the model and the log-likelihood after every E-step.
pub(crate) struct EmRun {
    pub model: GmmModel,
    #[cfg_attr(not(test), allow(dead_code))]
    pub trace: Vec<f64>,
}

/// Runs EM from the given initial means. `sd_floor` bounds every component
/// standard deviation from below; the constrained M-step keeps the
/// log-likelihood non-decreasing.
pub(crate) fn em_from(data: &[f64], init_means: &[f64], sd_floor: f64, opts: &GmmOptions) -> Option<EmRun> {
    let n = data.len();
    let g = init_means.len();
    let nf = n as f64;
    let mean = data.iter().sum::<f64>() / nf;
    let sd = (data.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / nf).sqrt();

    let mut means = init_means.to_vec();
    let mut sds = vec![(sd / g as f64).max(sd_floor); g];
    let mut weights = vec![1.0 / g as f64; g];
    let mut resp = vec![0.0; n * g];
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;

    for _ in 0..opts.max_iter {
        // E-step
        let mut ll = 0.0;
        for (i, &y) in data.iter().enumerate() {
            let row = &mut resp[i * g..(i + 1) * g];
            let mut max = f64::NEG_INFINITY;
            for k in 0..g {
                row[k] = log_component(y, weights[k], means[k], sds[k]);
                max = max.max(row[k]);
            }
            let mut s = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                s += *r;
            }
            for r in row.iter_mut() {
                *r /= s;
            }
            ll += max + s.ln();
        }
        if !ll.is_finite() {
            return None;
        }
        trace.push(ll);
        let converged = prev.is_finite() && (ll - prev).abs() <= opts.rel_tol * prev.abs();
        prev = ll;
        if converged {
            break;
        }

        // M-step
        for k in 0..g {
            let mut nk = 0.0;
            let mut sy = 0.0;
            for (i, &y) in data.iter().enumerate() {
                let r = resp[i * g + k];
                nk += r;
                sy += r * y;
            }
            if nk < 1e-8 {
                return None;
            }
            let mk = sy / nk;
            let mut ss = 0.0;
            for (i, &y) in data.iter().enumerate() {
                ss += resp[i * g + k] * (y - mk).powi(2);
            }
            weights[k] = nk / nf;
            means[k] = mk;
            sds[k] = (ss / nk).sqrt().max(sd_floor);
        }
    }

    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    let wsum: f64 = weights.iter().sum();
    Some(EmRun {
        model: GmmModel {
            weights: order.iter().map(|&k| weights[k] / wsum).collect(),
            means: order.iter().map(|&k| means[k]).collect(),
            stddevs: order.iter().map(|&k| sds[k]).collect(),
            loglik: prev,
            n,
        },
        trace,
    })
}

/// Relative standard-deviation floor, as a fraction of the data range. Keeps
/// exact-duplicate spikes (such as cropped-out zeros) from collapsing a
/// component to zero width.
pub const SD_FLOOR_FRACTION: f64 = 1e-3;

fn fit_fixed(sorted: &[f64], g: usize, opts: &GmmOptions) -> Result<GmmModel, SegmentationError> {
    let n = sorted.len();
    if n < 10 * g {
        return Err(SegmentationError::InsufficientData {
            needed: 10 * g,
            groups: g,
            got: n,
        });
    }
    let range = sorted[n - 1] - sorted[0];
    if range <= 0.0 {
        return Err(SegmentationError::DegenerateFit("all pixels are identical".into()));
    }
    let distinct = 1 + sorted.windows(2).filter(|w| w[1] > w[0]).count();
    if distinct < g {
        return Err(SegmentationError::DegenerateFit(format!(
            "{distinct} distinct values cannot support {g} components"
        )));
    }
    let sd_floor = SD_FLOOR_FRACTION * range;

    let inits: Vec<Vec<f64>> = (0..opts.restarts.max(1))
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((g as u64) << 32) ^ r as u64);
            (0..g)
                .map(|k| {
                    let base = (k as f64 + 0.5) / g as f64;
                    let jitter = if r == 0 {
                        0.0
                    } else {
                        rng.random_range(-0.25..0.25) / g as f64
                    };
                    quantile(sorted, base + jitter)
                })
                .collect()
        })
        .collect();

    let runs: Vec<Option<EmRun>> = inits.par_iter().map(|m| em_from(sorted, m, sd_floor, opts)).collect();
    let mut best: Option<GmmModel> = None;
    for run in runs.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| run.model.loglik > b.loglik) {
            best = Some(run.model);
        }
    }
    best.ok_or_else(|| SegmentationError::DegenerateFit(format!("every restart lost a component (G={g})")))
}

/// Maximum-likelihood Gaussian mixture by EM with quantile initialisation and
/// jittered restarts; `GroupCount::Auto` picks G in 2..=5 by minimum BIC.
pub fn fit_gmm(pixels: &[f64], groups: GroupCount, opts: &GmmOptions) -> Result<GmmModel, SegmentationError> {
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(SegmentationError::InvalidArgument("non-finite pixel".into()));
    }
    let mut sorted = pixels.to_vec();
    sorted.sort_by(f64::total_cmp);
    match groups {
        GroupCount::Fixed(g) if g < 2 => Err(SegmentationError::InvalidArgument(format!(
            "need at least 2 groups, got {g}"
        ))),
        GroupCount::Fixed(g) => fit_fixed(&sorted, g, opts),
        GroupCount::Auto => {
            let mut best: Option<GmmModel> = None;
            let mut last_err = None;
            for g in 2..=5 {
                match fit_fixed(&sorted, g, opts) {
                    Ok(m) => {
                        if best.as_ref().is_none_or(|b| m.bic() < b.bic()) {
                            best = Some(m);
                        }
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            best.ok_or_else(|| last_err.unwrap_or(SegmentationError::DegenerateFit("no fit".into())))
        }
    }
}

/// Number of grid points searched between the two lowest means.
pub const VALLEY_GRID: usize = 4096;

/// Cutoff at the minimum of the mixture density between the two lowest means.
pub fn find_threshold(model: &GmmModel) -> Result<Threshold, SegmentationError> {
    if model.groups() < 2 {
        return Err(SegmentationError::InvalidArgument("model needs at least 2 components".into()));
    }
    let (lo, hi) = (model.means[0], model.means[1]);
    let suggestion = 0.5 * (lo + hi);
    if !(hi > lo) {
        return Err(SegmentationError::NoValley { suggestion });
    }
    let step = (hi - lo) / (VALLEY_GRID - 1) as f64;
    let mut best = (0usize, f64::INFINITY);
    for k in 0..VALLEY_GRID {
        let y = lo + k as f64 * step;
        let v = model.log_density(y);
        if v < best.1 {
            best = (k, v);
        }
    }
    if best.0 == 0 || best.0 == VALLEY_GRID - 1 {
        return Err(SegmentationError::NoValley { suggestion });
    }
    Ok(Threshold {
        c: lo + best.0 as f64 * step,
        origin: ThresholdOrigin::Auto,
    })
}

/// Keeps values strictly above the cutoff, zeroes the rest.
pub fn apply_threshold(frame: &Frame, t: Threshold) -> Frame {
    frame
        .map(|v| if v > t.c { v } else { 0.0 })
        .expect("thresholding preserves finiteness")
}

/// Uniform histogram over `[min, max]`; the maximum lands in the last bin.
/// A single distinct value `v` is binned over `[v - 0.5, v + 0.5]`.
pub fn histogram(pixels: &[f64], nbins: usize) -> Result<HistogramSummary, SegmentationError> {
    if nbins < 2 {
        return Err(SegmentationError::InvalidArgument("nbins must be at least 2".into()));
    }
    if pixels.is_empty() {
        return Err(SegmentationError::InvalidArgument("no pixels".into()));
    }
    let (mut lo, mut hi) = pixels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(SegmentationError::InvalidArgument("non-finite pixel".into()));
    }
    if hi == lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / nbins as f64;
    let bin_edges: Vec<f64> = (0..=nbins)
        .map(|k| if k == nbins { hi } else { lo + k as f64 * width })
        .collect();
    let mut counts = vec![0u64; nbins];
    for &v in pixels {
        let k = (((v - lo) / width).floor() as usize).min(nbins - 1);
        counts[k] += 1;
    }
    Ok(HistogramSummary {
        bin_edges,
        counts,
        n_pixels: pixels.len() as u64,
    })
}
