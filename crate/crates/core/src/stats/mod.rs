//! Statistical nonparametric mapping of pixelwise differences.

pub mod bandwidth;
pub mod df;
pub mod fdr;
pub mod field;
pub mod smooth;
pub mod snm;
pub mod tmap;

use thiserror::Error;

pub use bandwidth::{default_grid, select_bandwidth, BandwidthSelection, CvOptions};
pub use df::{df_moments, estimate_df, DfEstimate, DfMethod, DfMoments, DfOptions};
pub use fdr::{bh_fdr, FdrResult};
pub use field::{curated_difference, pad_field, DiffField};
pub use smooth::{smooth_field, Bandwidths, HatOperator, KernelSupport, LinearSmoother, SmoothResult};
pub use snm::{run_snm, FdrMode, SnmConfig, SnmRun, StatMaps};
pub use tmap::{p_map, t_map, Sidedness, TMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bandwidth grid is empty")]
    EmptyGrid,
    #[error("need at least 7 masked pixels, found {0}")]
    InsufficientPixels(usize),
    #[error("non-positive degrees of freedom (delta1 = {delta1}, delta2 = {delta2:?})")]
    NonPositiveDf { delta1: f64, delta2: Option<f64> },
}
