//! The difference, smoothing, statistic and p-value chain over a run of
//! aligned frame pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bandwidth::{default_grid, select_bandwidth, BandwidthSelection, CvOptions};
use super::df::{df_moments, estimate_df, DfMoments, DfOptions};
use super::fdr::bh_fdr;
use super::field::{curated_difference, default_margin, pad_field, strip_values, DiffField};
use super::smooth::{Bandwidths, HatOperator, KernelSupport};
use super::tmap::{p_map, t_map, Sidedness};
use super::StatsError;
use crate::model::{Frame, Warning};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdrMode {
    /// One family per frame pair, over its masked pixels.
    #[default]
    PerFrame,
    /// One family over the masked pixels of every frame pair.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnmConfig {
    pub alpha: f64,
    pub sidedness: Sidedness,
    pub grid: Vec<Bandwidths>,
    pub cv: CvOptions,
    pub support: KernelSupport,
    pub df: DfOptions,
    pub fdr: FdrMode,
    /// Padding width; `ceil(4 * max(h1, h2))` when unset.
    pub margin: Option<usize>,
}

impl Default for SnmConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            sidedness: Sidedness::TwoSided,
            grid: default_grid(),
            cv: CvOptions::default(),
            support: KernelSupport::Truncated,
            df: DfOptions::default(),
            fdr: FdrMode::PerFrame,
            margin: None,
        }
    }
}

impl SnmConfig {
    pub fn validate(&self) -> Result<(), StatsError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(StatsError::InvalidArgument(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.grid.is_empty() {
            return Err(StatsError::EmptyGrid);
        }
        for h in &self.grid {
            Bandwidths::new(h.h1, h.h2)?;
        }
        Ok(())
    }
}

/// D, S, T and P fields for one aligned frame pair, on the unpadded grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatMaps {
    pub d: Frame,
    pub s: Frame,
    pub t: Frame,
    pub p: Frame,
    pub adjusted: Frame,
    pub significant: Vec<bool>,
    pub mask: Vec<bool>,
    pub sigma_hat: f64,
    pub alpha: f64,
    pub sidedness: Sidedness,
}

impl StatMaps {
    pub fn significant_count(&self) -> usize {
        self.significant.iter().filter(|&&s| s).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnmRun {
    pub bandwidths: Bandwidths,
    pub selection: Option<BandwidthSelection>,
    pub margin: usize,
    pub df: DfMoments,
    pub maps: Vec<StatMaps>,
    pub warnings: Vec<Warning>,
}

struct FrameStats {
    d: DiffField,
    s: Vec<f64>,
    t: Vec<f64>,
    p: Vec<f64>,
    sigma_hat: f64,
}

fn to_frame(values: Vec<f64>, shape: (usize, usize)) -> Frame {
    Frame::new(shape.0, shape.1, values).expect("statistics are finite")
}

/// Runs the chain on every pair. The bandwidth is chosen once, on the first
/// pair, and the hat matrix and degrees of freedom are shared by all pairs.
pub fn run_snm(pairs: &[(&Frame, &Frame)], mask: Option<&[bool]>, config: &SnmConfig) -> Result<SnmRun, StatsError> {
    config.validate()?;
    let Some(first) = pairs.first() else {
        return Err(StatsError::InvalidArgument("no frame pairs to analyse".into()));
    };
    let shape = first.0.shape();
    let diffs = pairs
        .iter()
        .map(|(a, b)| curated_difference(a, b, mask))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(d) = diffs.iter().find(|d| d.shape() != shape) {
        return Err(StatsError::ShapeMismatch(d.shape(), shape));
    }
    if diffs[0].masked_count() < 7 {
        return Err(StatsError::InsufficientPixels(diffs[0].masked_count()));
    }

    let mut warnings = Vec::new();
    let pre_margin = config
        .margin
        .unwrap_or_else(|| config.grid.iter().map(|h| default_margin(h.h1, h.h2)).max().unwrap_or(0));
    let selection = if config.grid.len() > 1 {
        Some(select_bandwidth(&pad_field(&diffs[0], pre_margin), &config.grid, config.support, &config.cv)?)
    } else {
        None
    };
    let h = selection.as_ref().map_or(config.grid[0], |s| s.chosen);
    let margin = config.margin.unwrap_or_else(|| default_margin(h.h1, h.h2));
    log::info!("bandwidths h1={} h2={}, margin {margin}", h.h1, h.h2);

    let padded: Vec<DiffField> = diffs.iter().map(|d| pad_field(d, margin)).collect();
    let op = HatOperator::for_field(&padded[0], h, config.support)?;
    let fallbacks = op.fallback_pixels().len();
    if fallbacks > 0 {
        warnings.push(Warning::new(
            "smooth",
            format!("{fallbacks} pixel(s) fell back to a local constant fit"),
        ));
    }
    let probe = op.smooth(&padded[0])?;
    let moments = df_moments(&op, probe.tr_h, probe.tr_hht, &config.df)?;

    let per_frame: Vec<FrameStats> = padded
        .into_par_iter()
        .zip(diffs.into_par_iter())
        .map(|(pd, d)| {
            let sr = op.smooth(&pd)?;
            let est = estimate_df(&sr, &moments);
            let tm = t_map(&sr, &est);
            let p = p_map(&tm.values, moments.nu, config.sidedness)?;
            let p = p.into_iter().zip(&sr.mask).map(|(v, &m)| if m { v } else { 1.0 }).collect::<Vec<_>>();
            let psh = pd.shape();
            Ok(FrameStats {
                s: strip_values(&sr.m_hat, psh, margin),
                t: strip_values(&tm.values, psh, margin),
                p: strip_values(&p, psh, margin),
                sigma_hat: est.sigma_hat,
                d,
            })
        })
        .collect::<Result<_, StatsError>>()?;

    let masked: Vec<usize> = (0..shape.0 * shape.1).filter(|&k| per_frame[0].d.mask[k]).collect();
    let families: Vec<Vec<usize>> = match config.fdr {
        FdrMode::PerFrame => (0..per_frame.len()).map(|f| vec![f]).collect(),
        FdrMode::Pooled => vec![(0..per_frame.len()).collect()],
    };
    let mut adjusted = vec![vec![1.0; shape.0 * shape.1]; per_frame.len()];
    let mut significant = vec![vec![false; shape.0 * shape.1]; per_frame.len()];
    for family in &families {
        let p: Vec<f64> = family
            .iter()
            .flat_map(|&f| masked.iter().map(move |&k| (f, k)))
            .map(|(f, k)| per_frame[f].p[k])
            .collect();
        let r = bh_fdr(&p, config.alpha);
        let mut idx = 0;
        for &f in family {
            for &k in &masked {
                adjusted[f][k] = r.adjusted[idx];
                significant[f][k] = r.rejected[idx];
                idx += 1;
            }
        }
    }

    let maps = per_frame
        .into_iter()
        .zip(adjusted.into_iter().zip(significant))
        .map(|(fs, (adj, sig))| StatMaps {
            d: fs.d.to_frame(),
            s: to_frame(fs.s, shape),
            t: to_frame(fs.t, shape),
            p: to_frame(fs.p, shape),
            adjusted: to_frame(adj, shape),
            significant: sig,
            mask: fs.d.mask,
            sigma_hat: fs.sigma_hat,
            alpha: config.alpha,
            sidedness: config.sidedness,
        })
        .collect();
    Ok(SnmRun {
        bandwidths: h,
        selection,
        margin,
        df: moments,
        maps,
        warnings,
    })
}
