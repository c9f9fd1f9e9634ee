//! Temporal and spatial alignment of the two sequences, plus region-of-interest
//! cropping and masking.

mod roi;
mod spatial;
mod temporal;

use thiserror::Error;

pub use roi::{common_crops, crop_roi, mask_polygon, polygon_mask};
pub use spatial::{
    manual_anchor, midline, register_midline, transform_from_midline, transform_from_points, warp, Interpolation, LineFit,
    MidlineOptions, MidlineRegistration, RigidTransform,
};
pub use temporal::{excluded_count, pearson, temporal_align, TemporalAlignment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("{frames} frames leave too few after excluding {excluded}")]
    TooShort { frames: usize, excluded: usize },
    #[error("midline needs at least 2 columns with content, found {0}")]
    NoContent(usize),
    #[error("registration points coincide")]
    CoincidentPoints,
}
