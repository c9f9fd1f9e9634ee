//! Heatmaps, alignment overlays and animated movies.
//!
//! Colour ramps are quantised to a fixed number of levels so every image
//! uses at most 256 distinct colours and GIF frames carry an exact palette.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Frame;

/// Levels per ramp. Diverging maps use this many on each side of white.
pub const RAMP_LEVELS: u32 = 100;
/// Levels per channel in the two-channel overlay.
pub const OVERLAY_LEVELS: u32 = 16;
pub const DEFAULT_ZOOM: u32 = 8;

const WHITE: [u8; 3] = [255, 255, 255];
const SEQ_LIGHT: [f64; 3] = [247.0, 251.0, 255.0];
const SEQ_DARK: [f64; 3] = [8.0, 48.0, 107.0];
const SIGNIFICANT: [u8; 3] = [255, 0, 0];

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("encoding failed: {0}")]
    Encoding(String),
    #[error("movie has no frames")]
    EmptyMovie,
    #[error("frame size {found:?} differs from {expected:?}")]
    SizeMismatch { expected: (u32, u32), found: (u32, u32) },
    #[error("invalid render spec: {0}")]
    InvalidSpec(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RenderError + '_ {
    move |source| RenderError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMapKind {
    Sequential,
    DivergingBlueRed,
    SignificanceOverlay,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    #[default]
    Auto,
    Fixed(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorMapSpec {
    pub kind: ColorMapKind,
    pub range: ValueRange,
}

impl ColorMapSpec {
    pub fn new(kind: ColorMapKind) -> Self {
        Self {
            kind,
            range: ValueRange::Auto,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if let ValueRange::Fixed(lo, hi) = self.range {
            if !(lo < hi) {
                return Err(RenderError::InvalidSpec(format!("range ({lo}, {hi}) is empty")));
            }
        }
        Ok(())
    }

    /// Range used for `field`. Diverging maps are symmetric about zero in
    /// auto mode.
    pub fn resolve(&self, field: &Frame) -> (f64, f64) {
        match self.range {
            ValueRange::Fixed(lo, hi) => (lo, hi),
            ValueRange::Auto => {
                let (lo, hi) = field.min_max();
                match self.kind {
                    ColorMapKind::DivergingBlueRed => {
                        let m = lo.abs().max(hi.abs());
                        (-m, m)
                    }
                    _ => (lo, hi),
                }
            }
        }
    }
}

/// Position in `[0, 1]` snapped to `levels` steps.
fn level(t: f64, levels: u32) -> f64 {
    let steps = (levels - 1) as f64;
    (t.clamp(0.0, 1.0) * steps).round() / steps
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [u8; 3] {
    std::array::from_fn(|i| (a[i] + (b[i] - a[i]) * t).round() as u8)
}

fn unit(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Colour of a single value under a resolved range.
pub fn color_of(v: f64, kind: ColorMapKind, (lo, hi): (f64, f64)) -> [u8; 3] {
    match kind {
        ColorMapKind::Sequential => lerp(SEQ_LIGHT, SEQ_DARK, level(unit(v, lo, hi), RAMP_LEVELS)),
        ColorMapKind::SignificanceOverlay => {
            let g = (255.0 * level(unit(v, lo, hi), RAMP_LEVELS)).round() as u8;
            [g, g, g]
        }
        ColorMapKind::DivergingBlueRed => {
            let scale = if v > 0.0 { hi } else { -lo };
            if v == 0.0 || !(scale > 0.0) {
                return WHITE;
            }
            let t = level(v.abs() / scale, RAMP_LEVELS);
            let fade = (255.0 * (1.0 - t)).round() as u8;
            if v > 0.0 {
                [fade, fade, 255]
            } else {
                [255, fade, fade]
            }
        }
    }
}

/// Pointwise heatmap of `field`; with `SignificanceOverlay`, pixels marked
/// in `significant` are drawn solid red over the grey base.
pub fn render_heatmap(field: &Frame, spec: &ColorMapSpec, significant: Option<&[bool]>) -> Result<RgbImage, RenderError> {
    spec.validate()?;
    let range = spec.resolve(field);
    let cols = field.cols();
    Ok(RgbImage::from_fn(cols as u32, field.rows() as u32, |x, y| {
        let k = y as usize * cols + x as usize;
        let hit = spec.kind == ColorMapKind::SignificanceOverlay && significant.is_some_and(|s| s[k]);
        Rgb(if hit {
            SIGNIFICANT
        } else {
            color_of(field.values()[k], spec.kind, range)
        })
    }))
}

/// Red channel from `f1`, green from `f2`, on a shared `[0, max]` scale.
/// Content present in both frames shows as yellow.
pub fn overlay_check(f1: &Frame, f2: &Frame) -> Result<RgbImage, RenderError> {
    if f1.shape() != f2.shape() {
        return Err(RenderError::SizeMismatch {
            expected: (f1.cols() as u32, f1.rows() as u32),
            found: (f2.cols() as u32, f2.rows() as u32),
        });
    }
    let max = f1.min_max().1.max(f2.min_max().1);
    let chan = |v: f64| (255.0 * level(unit(v.max(0.0), 0.0, max), OVERLAY_LEVELS)).round() as u8;
    let cols = f1.cols();
    Ok(RgbImage::from_fn(cols as u32, f1.rows() as u32, |x, y| {
        let k = y as usize * cols + x as usize;
        Rgb([chan(f1.values()[k]), chan(f2.values()[k]), 0])
    }))
}

/// Nearest-neighbour integer zoom.
pub fn upscale(img: &RgbImage, factor: u32) -> RgbImage {
    if factor <= 1 {
        return img.clone();
    }
    RgbImage::from_fn(img.width() * factor, img.height() * factor, |x, y| *img.get_pixel(x / factor, y / factor))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MovieKind {
    O1,
    O2,
    R1,
    R2,
    D,
    S,
    T,
    P,
}

impl MovieKind {
    pub const ALL: [MovieKind; 8] = [
        MovieKind::O1,
        MovieKind::O2,
        MovieKind::R1,
        MovieKind::R2,
        MovieKind::D,
        MovieKind::S,
        MovieKind::T,
        MovieKind::P,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MovieKind::O1 => "O1",
            MovieKind::O2 => "O2",
            MovieKind::R1 => "R1",
            MovieKind::R2 => "R2",
            MovieKind::D => "D",
            MovieKind::S => "S",
            MovieKind::T => "T",
            MovieKind::P => "P",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str().eq_ignore_ascii_case(s))
    }

    /// Colour map for this kind of movie.
    pub fn color_map(self) -> ColorMapSpec {
        match self {
            MovieKind::O1 | MovieKind::O2 | MovieKind::R1 | MovieKind::R2 => ColorMapSpec::new(ColorMapKind::Sequential),
            MovieKind::D | MovieKind::S | MovieKind::T => ColorMapSpec::new(ColorMapKind::DivergingBlueRed),
            MovieKind::P => ColorMapSpec {
                kind: ColorMapKind::SignificanceOverlay,
                range: ValueRange::Fixed(0.0, 1.0),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovieSpec {
    pub frame_delay_ms: u32,
    pub looping: bool,
    pub kind: MovieKind,
}

impl MovieSpec {
    pub fn new(kind: MovieKind) -> Self {
        Self {
            frame_delay_ms: 100,
            looping: true,
            kind,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.frame_delay_ms < 10 {
            return Err(RenderError::InvalidSpec(format!("frame delay {} ms is below 10", self.frame_delay_ms)));
        }
        Ok(())
    }
}

/// Directory holding the PNG frames written next to `gif_path`.
pub fn frames_dir(gif_path: &Path) -> PathBuf {
    let stem = gif_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    gif_path.with_file_name(format!("{stem}_frames"))
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<(), RenderError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| RenderError::Encoding(format!("{}: {e}", path.display())))
}

/// Palette and indices for an image with at most 256 colours.
fn exact_palette(img: &RgbImage) -> Option<(Vec<u8>, Vec<u8>)> {
    let mut lookup: HashMap<[u8; 3], u8> = HashMap::new();
    let mut palette = Vec::new();
    let mut indices = Vec::with_capacity((img.width() * img.height()) as usize);
    for p in img.pixels() {
        let idx = match lookup.get(&p.0) {
            Some(&i) => i,
            None => {
                if lookup.len() == 256 {
                    return None;
                }
                let i = lookup.len() as u8;
                lookup.insert(p.0, i);
                palette.extend_from_slice(&p.0);
                i
            }
        };
        indices.push(idx);
    }
    Some((palette, indices))
}

/// Writes an animated GIF and one PNG per frame into [`frames_dir`].
/// Returns the paths of everything written, GIF first.
pub fn encode_movie(frames: &[RgbImage], spec: &MovieSpec, path: &Path) -> Result<Vec<PathBuf>, RenderError> {
    spec.validate()?;
    let first = frames.first().ok_or(RenderError::EmptyMovie)?;
    let size = first.dimensions();
    if let Some(bad) = frames.iter().find(|f| f.dimensions() != size) {
        return Err(RenderError::SizeMismatch {
            expected: size,
            found: bad.dimensions(),
        });
    }
    if size.0 > u16::MAX as u32 || size.1 > u16::MAX as u32 {
        return Err(RenderError::InvalidSpec(format!("frame size {size:?} too large for GIF")));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut encoder = gif::Encoder::new(BufWriter::new(file), size.0 as u16, size.1 as u16, &[])
        .map_err(|e| RenderError::Encoding(e.to_string()))?;
    if spec.looping {
        encoder
            .set_repeat(gif::Repeat::Infinite)
            .map_err(|e| RenderError::Encoding(e.to_string()))?;
    }
    let delay = (spec.frame_delay_ms / 10) as u16;
    for img in frames {
        let mut frame = match exact_palette(img) {
            Some((palette, indices)) => {
                let mut f = gif::Frame::from_palette_pixels(size.0 as u16, size.1 as u16, indices, palette, None);
                f.dispose = gif::DisposalMethod::Keep;
                f
            }
            None => gif::Frame::from_rgb_speed(size.0 as u16, size.1 as u16, img.as_raw(), 10),
        };
        frame.delay = delay;
        encoder
            .write_frame(&frame)
            .map_err(|e| RenderError::Encoding(e.to_string()))?;
    }
    drop(encoder);

    let dir = frames_dir(path);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut written = vec![path.to_path_buf()];
    for (i, img) in frames.iter().enumerate() {
        let p = dir.join(format!("frame_{i:04}.png"));
        write_png(img, &p)?;
        written.push(p);
    }
    Ok(written)
}

/// Decodes every frame of a GIF to RGB.
pub fn decode_gif(path: &Path) -> Result<Vec<RgbImage>, RenderError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut opts = gif::DecodeOptions::new();
    opts.set_color_output(gif::ColorOutput::RGBA);
    let mut decoder = opts.read_info(file).map_err(|e| RenderError::Encoding(e.to_string()))?;
    let (w, h) = (decoder.width() as u32, decoder.height() as u32);
    let mut out = Vec::new();
    while let Some(frame) = decoder.read_next_frame().map_err(|e| RenderError::Encoding(e.to_string()))? {
        if (frame.width as u32, frame.height as u32) != (w, h) {
            return Err(RenderError::Encoding("partial GIF frames are not supported".into()));
        }
        let rgb: Vec<u8> = frame.buffer.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
        out.push(RgbImage::from_raw(w, h, rgb).expect("buffer matches frame size"));
    }
    Ok(out)
}

/// Field exported for 3D surface display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightField {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<f64>,
    pub range: (f64, f64),
}

impl HeightField {
    pub fn from_frame(f: &Frame) -> Self {
        Self {
            rows: f.rows(),
            cols: f.cols(),
            values: f.values().to_vec(),
            range: f.min_max(),
        }
    }
}
