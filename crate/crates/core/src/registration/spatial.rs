//! Rigid spatial registration.
//!
//! Transforms live in a mathematical frame: `x` is the column index and `y`
//! is the height above the bottom edge, so pixel `(row, col)` sits at
//! `(x, y) = (col, rows - row - 0.5)`. Angles are counter-clockwise in that
//! frame. A transform rotates about the frame centre
//! `((cols - 1) / 2, rows / 2)` and then translates by `(s_x, s_y)`.
//!
//! Midline points follow the column-count rule: with `u` and `l` the numbers
//! of non-zero pixels in the upper and lower halves of a column,
//! `m_c = rows / 2 + (u - l) / 2`. For content straddling the centre row this
//! is the height of the content's vertical centre, so a `LineFit` is
//! expressed in the same `(x, y)` frame.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RegistrationError;
use crate::model::{Frame, PixelCoord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// `(column, m_c)` for every column holding content.
    pub midpoints: Vec<(f64, f64)>,
    pub r2: f64,
}

impl LineFit {
    pub fn at(&self, col: f64) -> f64 {
        self.slope * col + self.intercept
    }

    /// Root-mean-square vertical distance of the midpoints from the line.
    pub fn rms_residual(&self) -> f64 {
        if self.midpoints.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.midpoints.iter().map(|&(c, m)| (m - self.at(c)).powi(2)).sum();
        (ss / self.midpoints.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Radians, in `(-pi, pi]`.
    pub theta: f64,
    pub s_x: f64,
    pub s_y: f64,
    #[serde(default)]
    pub interp: Interpolation,
}

fn normalise_angle(theta: f64) -> f64 {
    let mut t = theta % std::f64::consts::TAU;
    if t <= -std::f64::consts::PI {
        t += std::f64::consts::TAU;
    } else if t > std::f64::consts::PI {
        t -= std::f64::consts::TAU;
    }
    t
}

/// Converts between pixel coordinates and the transform frame.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    rows: f64,
    center: (f64, f64),
}

impl Geometry {
    fn new((rows, cols): (usize, usize)) -> Self {
        Self {
            rows: rows as f64,
            center: ((cols as f64 - 1.0) / 2.0, rows as f64 / 2.0),
        }
    }

    fn to_xy(&self, p: PixelCoord) -> (f64, f64) {
        (p.col, self.rows - p.row - 0.5)
    }

    fn to_pixel(&self, (x, y): (f64, f64)) -> PixelCoord {
        PixelCoord::new(self.rows - 0.5 - y, x)
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            theta: 0.0,
            s_x: 0.0,
            s_y: 0.0,
            interp: Interpolation::Bilinear,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.theta == 0.0 && self.s_x == 0.0 && self.s_y == 0.0
    }

    pub fn with_interp(mut self, interp: Interpolation) -> Self {
        self.interp = interp;
        self
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        let (s, c) = self.theta.sin_cos();
        RigidTransform {
            theta: normalise_angle(self.theta + first.theta),
            s_x: c * first.s_x - s * first.s_y + self.s_x,
            s_y: s * first.s_x + c * first.s_y + self.s_y,
            interp: first.interp,
        }
    }

    /// Forward map in the transform frame for a frame of the given shape.
    pub fn forward_xy(&self, (x, y): (f64, f64), shape: (usize, usize)) -> (f64, f64) {
        let (cx, cy) = Geometry::new(shape).center;
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (c * dx - s * dy + cx + self.s_x, s * dx + c * dy + cy + self.s_y)
    }

    pub fn inverse_xy(&self, (x, y): (f64, f64), shape: (usize, usize)) -> (f64, f64) {
        let (cx, cy) = Geometry::new(shape).center;
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - cx - self.s_x, y - cy - self.s_y);
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    }

    /// Where the pixel location `p` lands after the transform.
    pub fn apply(&self, p: PixelCoord, shape: (usize, usize)) -> PixelCoord {
        let g = Geometry::new(shape);
        g.to_pixel(self.forward_xy(g.to_xy(p), shape))
    }

    pub fn apply_inverse(&self, p: PixelCoord, shape: (usize, usize)) -> PixelCoord {
        let g = Geometry::new(shape);
        g.to_pixel(self.inverse_xy(g.to_xy(p), shape))
    }
}

/// Column-wise midpoints and their least-squares line.
pub fn midline(frame: &Frame) -> Result<LineFit, RegistrationError> {
    let (rows, cols) = frame.shape();
    let upper_end = rows / 2;
    let lower_start = rows.div_ceil(2);
    let half = rows as f64 / 2.0;
    let mut midpoints = Vec::new();
    for c in 0..cols {
        let mut any = false;
        let (mut u, mut l) = (0usize, 0usize);
        for r in 0..rows {
            if frame.get(r, c) != 0.0 {
                any = true;
                if r < upper_end {
                    u += 1;
                } else if r >= lower_start {
                    l += 1;
                }
            }
        }
        if any {
            midpoints.push((c as f64, half + (u as f64 - l as f64) / 2.0));
        }
    }
    if midpoints.len() < 2 {
        return Err(RegistrationError::NoContent(midpoints.len()));
    }
    let n = midpoints.len() as f64;
    let mx = midpoints.iter().map(|p| p.0).sum::<f64>() / n;
    let my = midpoints.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = midpoints.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = midpoints.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = midpoints.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(LineFit {
        slope,
        intercept,
        midpoints,
        r2,
    })
}

/// Rotation levelling the midline, then a shift bringing its point at the
/// centre column onto height `rows / 2`.
pub fn transform_from_midline(fit: &LineFit, shape: (usize, usize)) -> RigidTransform {
    let g = Geometry::new(shape);
    let theta = -fit.slope.atan();
    let delta = fit.at(g.center.0) - g.center.1;
    let (s, c) = theta.sin_cos();
    RigidTransform {
        theta,
        s_x: s * delta,
        s_y: -c * delta,
        interp: Interpolation::Bilinear,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MidlineOptions {
    /// 1 gives the plain single fit-and-level step.
    pub max_iterations: usize,
    /// Stop once the re-fitted midline slope is at most this in magnitude.
    pub slope_tol: f64,
}

impl Default for MidlineOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            slope_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidlineRegistration {
    pub transform: RigidTransform,
    /// Midline of the frame before each step, the first on the input frame.
    pub fits: Vec<LineFit>,
}

/// Levels the midline of `frame`. Chord midpoints of a rotated finite blob
/// lie on a line flatter than the blob's axis, so one step under-rotates;
/// the step is repeated on the warped frame and the transforms composed
/// until the midline is level.
pub fn register_midline(frame: &Frame, opts: &MidlineOptions) -> Result<MidlineRegistration, RegistrationError> {
    let shape = frame.shape();
    let mut t = RigidTransform::identity();
    let mut fits = Vec::new();
    for step in 0..opts.max_iterations.max(1) {
        let current = if step == 0 { frame.clone() } else { warp(frame, &t) };
        let fit = midline(&current)?;
        let done = step > 0 && fit.slope.abs() <= opts.slope_tol;
        let dt = transform_from_midline(&fit, shape);
        fits.push(fit);
        if done {
            break;
        }
        t = dt.compose(&t);
    }
    Ok(MidlineRegistration { transform: t, fits })
}

/// The 0-based pixel that a manual reference point is moved to: column 4,
/// row `rows / 2` (rounded down).
pub fn manual_anchor(shape: (usize, usize)) -> PixelCoord {
    PixelCoord::new((shape.0 / 2) as f64, 4.0)
}

/// Rotation turning the ray `p1 -> p2` toward increasing columns, then a
/// shift moving `p1` onto [`manual_anchor`].
pub fn transform_from_points(
    p1: PixelCoord,
    p2: PixelCoord,
    shape: (usize, usize),
) -> Result<RigidTransform, RegistrationError> {
    if p1 == p2 {
        return Err(RegistrationError::CoincidentPoints);
    }
    let g = Geometry::new(shape);
    let a = g.to_xy(p1);
    let b = g.to_xy(p2);
    let theta = normalise_angle(-(b.1 - a.1).atan2(b.0 - a.0));
    let (s, c) = theta.sin_cos();
    let (dx, dy) = (a.0 - g.center.0, a.1 - g.center.1);
    let anchor = g.to_xy(manual_anchor(shape));
    Ok(RigidTransform {
        theta,
        s_x: anchor.0 - g.center.0 - (c * dx - s * dy),
        s_y: anchor.1 - g.center.1 - (s * dx + c * dy),
        interp: Interpolation::Bilinear,
    })
}

fn sample(frame: &Frame, row: f64, col: f64, interp: Interpolation) -> f64 {
    let (rows, cols) = (frame.rows() as isize, frame.cols() as isize);
    match interp {
        Interpolation::Nearest => {
            let (r, c) = (row.round() as isize, col.round() as isize);
            if (0..rows).contains(&r) && (0..cols).contains(&c) {
                frame.get(r as usize, c as usize)
            } else {
                0.0
            }
        }
        Interpolation::Bilinear => {
            // Zero outside the frame, blended linearly across the border.
            let (r0, c0) = (row.floor(), col.floor());
            let (fr, fc) = (row - r0, col - c0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            let at = |r: isize, c: isize| {
                if (0..rows).contains(&r) && (0..cols).contains(&c) {
                    frame.get(r as usize, c as usize)
                } else {
                    0.0
                }
            };
            let top = at(r0, c0) * (1.0 - fc) + if fc > 0.0 { at(r0, c0 + 1) * fc } else { 0.0 };
            if fr > 0.0 {
                let bottom = at(r0 + 1, c0) * (1.0 - fc) + if fc > 0.0 { at(r0 + 1, c0 + 1) * fc } else { 0.0 };
                top * (1.0 - fr) + bottom * fr
            } else {
                top
            }
        }
    }
}

/// Resamples the frame under the transform; samples falling outside the
/// source are zero.
pub fn warp(frame: &Frame, t: &RigidTransform) -> Frame {
    if t.is_identity() {
        return frame.clone();
    }
    let shape = frame.shape();
    let g = Geometry::new(shape);
    let (rows, cols) = shape;
    let values: Vec<f64> = (0..rows * cols)
        .into_par_iter()
        .map(|k| {
            let out = PixelCoord::new((k / cols) as f64, (k % cols) as f64);
            let src = g.to_pixel(t.inverse_xy(g.to_xy(out), shape));
            sample(frame, src.row, src.col, t.interp)
        })
        .collect();
    Frame::new(rows, cols, values).expect("interpolation of finite values is finite")
}
