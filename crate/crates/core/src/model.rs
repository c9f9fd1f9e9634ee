//! Shared domain types: frames, sequences, regions of interest and pixel
//! coordinates.
//!
//! Coordinates are 0-based and row-major everywhere in this crate. Rows grow
//! downward, columns grow to the right. A pixel `(i, j)` has its centre at
//! `PixelCoord { row: i as f64, col: j as f64 }`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("frame needs {expected} values for {rows}x{cols}, got {got}")]
    WrongLength {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("frame dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("frame must be at least 2x2, got {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("sequence {0:?} has no frames")]
    EmptySequence(String),
    #[error("frame {index} of sequence {label:?} is {got:?}, expected {expected:?}")]
    RaggedSequence {
        label: String,
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("region {roi:?} does not fit a {rows}x{cols} frame")]
    OutOfBounds { roi: RectRoi, rows: usize, cols: usize },
    #[error("polygon needs at least 3 vertices, got {0}")]
    DegeneratePolygon(usize),
}

/// A non-fatal condition worth surfacing to the user, tagged with the stage
/// that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub stage: String,
    pub message: String,
}

impl Warning {
    pub fn new(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            message: message.into(),
        }
    }
}

/// One grayscale intensity matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Frame {
    /// Builds a frame from row-major values. Rejects NaN and infinities.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, ModelError> {
        if rows == 0 || cols == 0 {
            return Err(ModelError::EmptyShape { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(ModelError::WrongLength {
                rows,
                cols,
                expected: rows * cols,
                got: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                row: k / cols,
                col: k % cols,
                value: values[k],
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "frame dimensions must be positive");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    /// Builds a frame from nested rows, mostly useful in tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, ModelError> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        let values: Vec<f64> = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(nrows, ncols, values)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, ModelError> {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self::new(rows, cols, values)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    /// Applies `f` to every value. The result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, ModelError> {
        Self::new(self.rows, self.cols, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// The at-least-2x2 rule applied to scanned and analysed frames.
    pub fn check_min_shape(&self) -> Result<(), ModelError> {
        if self.rows < 2 || self.cols < 2 {
            return Err(ModelError::TooSmall {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }
}

/// Ordered frames of identical shape plus where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    frames: Vec<Frame>,
    pub source: String,
    pub label: String,
}

impl Sequence {
    pub fn new(frames: Vec<Frame>, source: impl Into<String>, label: impl Into<String>) -> Result<Self, ModelError> {
        let label = label.into();
        let first = frames.first().ok_or_else(|| ModelError::EmptySequence(label.clone()))?;
        let expected = first.shape();
        for (index, f) in frames.iter().enumerate() {
            f.check_min_shape()?;
            if f.shape() != expected {
                return Err(ModelError::RaggedSequence {
                    label,
                    index,
                    expected,
                    got: f.shape(),
                });
            }
        }
        Ok(Self {
            frames,
            source: source.into(),
            label,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames[0].shape()
    }

    /// Replaces the frames, keeping provenance. Shapes are re-validated.
    pub fn with_frames(&self, frames: Vec<Frame>) -> Result<Self, ModelError> {
        Self::new(frames, self.source.clone(), self.label.clone())
    }

    /// Keeps the first `n` frames (no-op when `n >= frame_count`).
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.frames.truncate(n.max(1));
        out
    }
}

/// Axis-aligned crop rectangle, inclusive origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RectRoi {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl RectRoi {
    pub fn new(row0: usize, col0: usize, height: usize, width: usize) -> Self {
        Self {
            row0,
            col0,
            height,
            width,
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::new(0, 0, rows, cols)
    }

    pub fn check_within(&self, rows: usize, cols: usize) -> Result<(), ModelError> {
        if self.height == 0
            || self.width == 0
            || self.row0 + self.height > rows
            || self.col0 + self.width > cols
        {
            return Err(ModelError::OutOfBounds {
                roi: *self,
                rows,
                cols,
            });
        }
        Ok(())
    }
}

/// A sub-pixel location, `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub row: f64,
    pub col: f64,
}

impl PixelCoord {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }
}

/// Closed polygon; the last vertex connects back to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PixelCoord>", into = "Vec<PixelCoord>")]
pub struct PolygonRoi {
    vertices: Vec<PixelCoord>,
}

impl TryFrom<Vec<PixelCoord>> for PolygonRoi {
    type Error = ModelError;

    fn try_from(v: Vec<PixelCoord>) -> Result<Self, ModelError> {
        Self::new(v)
    }
}

impl From<PolygonRoi> for Vec<PixelCoord> {
    fn from(p: PolygonRoi) -> Self {
        p.vertices
    }
}

impl PolygonRoi {
    pub fn new(vertices: Vec<PixelCoord>) -> Result<Self, ModelError> {
        if vertices.len() < 3 {
            return Err(ModelError::DegeneratePolygon(vertices.len()));
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[PixelCoord] {
        &self.vertices
    }

    /// Even-odd containment test. Points on an edge count as inside.
    pub fn contains(&self, p: PixelCoord) -> bool {
        const EDGE_TOL: f64 = 1e-9;
        let n = self.vertices.len();
        let mut inside = false;
        for k in 0..n {
            let a = self.vertices[k];
            let b = self.vertices[(k + 1) % n];
            if on_segment(p, a, b, EDGE_TOL) {
                return true;
            }
            // Ray cast toward +col.
            if (a.row > p.row) != (b.row > p.row) {
                let t = (p.row - a.row) / (b.row - a.row);
                let col = a.col + t * (b.col - a.col);
                if p.col < col {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn on_segment(p: PixelCoord, a: PixelCoord, b: PixelCoord, tol: f64) -> bool {
    let (dr, dc) = (b.row - a.row, b.col - a.col);
    let len2 = dr * dr + dc * dc;
    if len2 == 0.0 {
        return (p.row - a.row).abs() <= tol && (p.col - a.col).abs() <= tol;
    }
    let t = ((p.row - a.row) * dr + (p.col - a.col) * dc) / len2;
    if !(-tol..=1.0 + tol).contains(&t) {
        return false;
    }
    let cross = (p.row - a.row) * dc - (p.col - a.col) * dr;
    cross.abs() / len2.sqrt() <= tol
}

/// Two sequences cut to a common length and checked for equal frame shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedPair {
    pub seq1: Sequence,
    pub seq2: Sequence,
    pub warnings: Vec<Warning>,
}

/// Truncates both sequences to the shorter length and checks frame shapes.
pub fn validate_pair(seq1: &Sequence, seq2: &Sequence) -> Result<ValidatedPair, ModelError> {
    if seq1.shape() != seq2.shape() {
        return Err(ModelError::ShapeMismatch {
            left: seq1.shape(),
            right: seq2.shape(),
        });
    }
    let n = seq1.frame_count().min(seq2.frame_count());
    let mut warnings = Vec::new();
    if seq1.frame_count() != seq2.frame_count() {
        let msg = format!(
            "frame counts differ ({} vs {}); both truncated to {n}",
            seq1.frame_count(),
            seq2.frame_count()
        );
        log::warn!("{msg}");
        warnings.push(Warning::new("validate", msg));
    }
    Ok(ValidatedPair {
        seq1: seq1.truncated(n),
        seq2: seq2.truncated(n),
        warnings,
    })
}
