//! Difference fields between aligned frames.

use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::model::Frame;

/// One frame of pixelwise differences on a grid.
///
/// `mask` marks the pixels where estimates and tests are produced.
/// `observed` marks the pixels that enter local fits as data; it always
/// contains `mask` and additionally holds any zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffField {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub observed: Vec<bool>,
    /// Padding added on every side by [`pad_field`].
    pub margin: usize,
}

impl DiffField {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self, StatsError> {
        let n = rows * cols;
        if n == 0 || values.len() != n || mask.len() != n {
            return Err(StatsError::InvalidArgument(format!(
                "field {rows}x{cols} with {} values and {} mask entries",
                values.len(),
                mask.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::InvalidArgument("non-finite difference value".into()));
        }
        Ok(Self {
            rows,
            cols,
            values,
            observed: mask.clone(),
            mask,
            margin: 0,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_frame(&self) -> Frame {
        Frame::new(self.rows, self.cols, self.values.clone()).expect("field values are finite")
    }

    /// Removes `margin` pixels from every side, undoing [`pad_field`].
    pub fn strip(&self, margin: usize) -> Vec<f64> {
        strip_values(&self.values, self.shape(), margin)
    }
}

/// Central block of a padded row-major grid.
pub fn strip_values(values: &[f64], (rows, cols): (usize, usize), margin: usize) -> Vec<f64> {
    let inner_cols = cols - 2 * margin;
    (margin..rows - margin)
        .flat_map(|r| values[r * cols + margin..r * cols + margin + inner_cols].iter().copied())
        .collect()
}

/// `f1 - f2`, zeroed outside `mask` (all pixels when `None`).
pub fn curated_difference(f1: &Frame, f2: &Frame, mask: Option<&[bool]>) -> Result<DiffField, StatsError> {
    if f1.shape() != f2.shape() {
        return Err(StatsError::ShapeMismatch(f1.shape(), f2.shape()));
    }
    let (rows, cols) = f1.shape();
    let mask = match mask {
        Some(m) if m.len() != rows * cols => {
            return Err(StatsError::InvalidArgument(format!(
                "mask has {} entries for a {rows}x{cols} frame",
                m.len()
            )))
        }
        Some(m) => m.to_vec(),
        None => vec![true; rows * cols],
    };
    let values = f1
        .values()
        .iter()
        .zip(f2.values())
        .zip(&mask)
        .map(|((a, b), &m)| if m { a - b } else { 0.0 })
        .collect();
    DiffField::new(rows, cols, values, mask)
}

/// Surrounds the field with `margin` zero-valued pixels that are observed
/// (they enter local fits) but not masked.
pub fn pad_field(d: &DiffField, margin: usize) -> DiffField {
    if margin == 0 {
        return d.clone();
    }
    let rows = d.rows + 2 * margin;
    let cols = d.cols + 2 * margin;
    let mut values = vec![0.0; rows * cols];
    let mut mask = vec![false; rows * cols];
    let mut observed = vec![true; rows * cols];
    for r in 0..d.rows {
        let src = r * d.cols;
        let dst = (r + margin) * cols + margin;
        values[dst..dst + d.cols].copy_from_slice(&d.values[src..src + d.cols]);
        mask[dst..dst + d.cols].copy_from_slice(&d.mask[src..src + d.cols]);
        observed[dst..dst + d.cols].copy_from_slice(&d.observed[src..src + d.cols]);
    }
    DiffField {
        rows,
        cols,
        values,
        mask,
        observed,
        margin: d.margin + margin,
    }
}

/// Default margin for the given bandwidths: `ceil(4 * max(h1, h2))`.
pub fn default_margin(h1: f64, h2: f64) -> usize {
    (4.0 * h1.max(h2)).ceil() as usize
}
