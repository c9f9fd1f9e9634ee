//! End-to-end run: two CSV files in, maps, movies and a manifest out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{scan_file, write_frame, IngestError, ScanSpec};
use crate::model::{validate_pair, Frame, ModelError, PixelCoord, PolygonRoi, RectRoi, Sequence, Warning};
use crate::registration::{
    common_crops, crop_roi, mask_polygon, polygon_mask, register_midline, temporal_align, transform_from_points,
    warp, MidlineOptions, MidlineRegistration, RegistrationError, RigidTransform, TemporalAlignment,
};
use crate::render::{
    encode_movie, overlay_check, render_heatmap, upscale, write_png, ColorMapKind, ColorMapSpec, HeightField,
    MovieKind, MovieSpec, RenderError, ValueRange, DEFAULT_ZOOM,
};
use crate::segmentation::{
    apply_threshold, find_threshold, fit_gmm, GmmModel, GmmOptions, GroupCount, SegmentationError, Threshold,
};
use crate::stats::{run_snm, SnmConfig, SnmRun, StatsError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OVERLAY_FILE: &str = "overlay.png";
/// Pixels beyond this count are stride-sampled before mixture fitting.
pub const GMM_SAMPLE_CAP: usize = 50_000;
/// Midline residual, in pixels, above which manual registration is suggested.
pub const MIDLINE_RMS_WARN: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SegMode {
    Auto { groups: GroupCount },
    Manual { c1: f64, c2: f64 },
}

impl Default for SegMode {
    fn default() -> Self {
        SegMode::Auto { groups: GroupCount::Auto }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum RegMode {
    #[default]
    Auto,
    /// Reference and direction points for each sequence.
    Manual {
        seq1: [PixelCoord; 2],
        seq2: [PixelCoord; 2],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Display {
    #[default]
    Basic,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub file1: PathBuf,
    pub file2: PathBuf,
    pub scan: ScanSpec,
    #[serde(default)]
    pub preprocessed: bool,
    #[serde(default)]
    pub seg: SegMode,
    #[serde(default)]
    pub reg: RegMode,
    #[serde(default)]
    pub roi1: Option<RectRoi>,
    #[serde(default)]
    pub roi2: Option<RectRoi>,
    #[serde(default)]
    pub polygon: Option<PolygonRoi>,
    #[serde(default)]
    pub display: Display,
    #[serde(default = "default_pmap_dim")]
    pub pmap_dim: u8,
    #[serde(default)]
    pub snm: SnmConfig,
    #[serde(default)]
    pub midline: MidlineOptions,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub assume_aligned: bool,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_zoom")]
    pub zoom: u32,
    #[serde(default = "default_delay")]
    pub frame_delay_ms: u32,
}

fn default_pmap_dim() -> u8 {
    2
}

fn default_zoom() -> u32 {
    DEFAULT_ZOOM
}

fn default_delay() -> u32 {
    100
}

impl RunConfig {
    pub fn new(file1: impl Into<PathBuf>, file2: impl Into<PathBuf>, scan: ScanSpec, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            file1: file1.into(),
            file2: file2.into(),
            scan,
            preprocessed: false,
            seg: SegMode::default(),
            reg: RegMode::default(),
            roi1: None,
            roi2: None,
            polygon: None,
            display: Display::Basic,
            pmap_dim: 2,
            snm: SnmConfig::default(),
            midline: MidlineOptions::default(),
            parallel: false,
            workers: None,
            assume_aligned: false,
            seed: 0,
            out_dir: out_dir.into(),
            zoom: DEFAULT_ZOOM,
            frame_delay_ms: 100,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| PipelineError::input("config", m);
        self.scan.validate().map_err(|e| bad(e.to_string()))?;
        self.snm.validate().map_err(|e| bad(e.to_string()))?;
        if !matches!(self.pmap_dim, 2 | 3) {
            return Err(bad(format!("pmap_dim must be 2 or 3, got {}", self.pmap_dim)));
        }
        if let SegMode::Manual { c1, c2 } = self.seg {
            if !(c1.is_finite() && c2.is_finite()) {
                return Err(bad("manual cutoffs must be finite".into()));
            }
        }
        if let SegMode::Auto { groups: GroupCount::Fixed(g) } = self.seg {
            if !(2..=5).contains(&g) {
                return Err(bad(format!("group count must be in 2..=5, got {g}")));
            }
        }
        if self.workers == Some(0) {
            return Err(bad("workers must be positive".into()));
        }
        if self.zoom == 0 || self.frame_delay_ms < 10 {
            return Err(bad("zoom must be positive and frame delay at least 10 ms".into()));
        }
        Ok(())
    }

    /// Threads used by the run.
    pub fn threads(&self) -> usize {
        if self.parallel {
            self.workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Input,
    Numeric,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage}{}: {message}", frame.map(|f| format!(" (frame {f})")).unwrap_or_default())]
pub struct PipelineError {
    pub stage: String,
    pub frame: Option<usize>,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn input(stage: &str, message: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            frame: None,
            kind: ErrorKind::Input,
            message: message.into(),
        }
    }

    pub fn numeric(stage: &str, message: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            frame: None,
            kind: ErrorKind::Numeric,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Input => 2,
            ErrorKind::Numeric => 4,
        }
    }
}

impl From<IngestError> for PipelineError {
    fn from(e: IngestError) -> Self {
        PipelineError::input("scan", e.to_string())
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        PipelineError::input("validate", e.to_string())
    }
}

impl From<SegmentationError> for PipelineError {
    fn from(e: SegmentationError) -> Self {
        PipelineError::numeric("segment", e.to_string())
    }
}

impl From<RegistrationError> for PipelineError {
    fn from(e: RegistrationError) -> Self {
        PipelineError::numeric("register", e.to_string())
    }
}

impl From<StatsError> for PipelineError {
    fn from(e: StatsError) -> Self {
        let kind = match e {
            StatsError::InvalidArgument(_) | StatsError::EmptyGrid => ErrorKind::Input,
            _ => ErrorKind::Numeric,
        };
        PipelineError {
            stage: "snm".into(),
            frame: None,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<RenderError> for PipelineError {
    fn from(e: RenderError) -> Self {
        PipelineError::input("render", e.to_string())
    }
}

/// Segmentation of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationOutcome {
    pub threshold: Threshold,
    pub model: Option<GmmModel>,
}

/// Every pixel of the sequence, stride-sampled down to `GMM_SAMPLE_CAP`.
pub fn sequence_pixels(seq: &Sequence) -> Vec<f64> {
    let all: Vec<f64> = seq.frames().iter().flat_map(|f| f.values().iter().copied()).collect();
    if all.len() <= GMM_SAMPLE_CAP {
        return all;
    }
    let stride = all.len().div_ceil(GMM_SAMPLE_CAP);
    all.into_iter().step_by(stride).collect()
}

/// Fits or accepts the cutoff for one sequence.
pub fn choose_threshold(
    seq: &Sequence,
    groups: Option<GroupCount>,
    manual: Option<f64>,
    seed: u64,
) -> Result<SegmentationOutcome, SegmentationError> {
    if let Some(c) = manual {
        return Ok(SegmentationOutcome {
            threshold: Threshold::manual(c),
            model: None,
        });
    }
    let opts = GmmOptions { seed, ..GmmOptions::default() };
    let model = fit_gmm(&sequence_pixels(seq), groups.unwrap_or(GroupCount::Auto), &opts)?;
    let threshold = find_threshold(&model)?;
    Ok(SegmentationOutcome {
        threshold,
        model: Some(model),
    })
}

pub fn segment_sequence(seq: &Sequence, t: Threshold) -> Result<Sequence, ModelError> {
    seq.with_frames(seq.frames().iter().map(|f| apply_threshold(f, t)).collect())
}

/// Crops both sequences to common-size rectangles. A missing rectangle
/// falls back to the other one, or to the full frame.
pub fn crop_pair(
    seq1: &Sequence,
    seq2: &Sequence,
    roi1: Option<RectRoi>,
    roi2: Option<RectRoi>,
) -> Result<(Sequence, Sequence), ModelError> {
    let (rows, cols) = seq1.shape();
    let (a, b) = match (roi1, roi2) {
        (None, None) => return Ok((seq1.clone(), seq2.clone())),
        (Some(a), None) => (a, a),
        (None, Some(b)) => (b, b),
        (Some(a), Some(b)) => (a, b),
    };
    let (a, b) = common_crops(&a, &b, rows, cols)?;
    let crop = |s: &Sequence, r: &RectRoi| -> Result<Sequence, ModelError> {
        s.with_frames(s.frames().iter().map(|f| crop_roi(f, r)).collect::<Result<_, _>>()?)
    };
    Ok((crop(seq1, &a)?, crop(seq2, &b)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialRegistration {
    pub transforms: [RigidTransform; 2],
    pub midline: Option<[MidlineRegistration; 2]>,
}

/// Rigid transforms for both sequences from their reference frames.
pub fn spatial_transforms(
    ref1: &Frame,
    ref2: &Frame,
    mode: &RegMode,
    opts: &MidlineOptions,
) -> Result<SpatialRegistration, RegistrationError> {
    match mode {
        RegMode::Auto => {
            let a = register_midline(ref1, opts)?;
            let b = register_midline(ref2, opts)?;
            Ok(SpatialRegistration {
                transforms: [a.transform, b.transform],
                midline: Some([a, b]),
            })
        }
        RegMode::Manual { seq1, seq2 } => Ok(SpatialRegistration {
            transforms: [
                transform_from_points(seq1[0], seq1[1], ref1.shape())?,
                transform_from_points(seq2[0], seq2[1], ref2.shape())?,
            ],
            midline: None,
        }),
    }
}

pub fn warp_sequence(seq: &Sequence, t: &RigidTransform) -> Sequence {
    use rayon::prelude::*;
    let frames: Vec<Frame> = seq.frames().par_iter().map(|f| warp(f, t)).collect();
    seq.with_frames(frames).expect("warping keeps shape")
}

/// Frames ready for analysis together with everything learned on the way.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Input frames (cropped) after the head exclusion.
    pub original: [Sequence; 2],
    /// Segmented and registered frames after the head exclusion.
    pub registered: [Sequence; 2],
    /// Indices into `registered` of each analysed pair.
    pub pairs: Vec<(usize, usize)>,
    pub mask: Option<Vec<bool>>,
    pub segmentation: Option<[SegmentationOutcome; 2]>,
    pub alignment: Option<TemporalAlignment>,
    pub spatial: Option<SpatialRegistration>,
    pub warnings: Vec<Warning>,
}

impl Prepared {
    /// Registered reference frames shown in the alignment check.
    pub fn reference_frames(&self) -> (&Frame, &Frame) {
        let (a, b) = self.pairs[0];
        (&self.registered[0].frames()[a], &self.registered[1].frames()[b])
    }
}

fn tail(seq: &Sequence, from: usize) -> Sequence {
    seq.with_frames(seq.frames()[from..].to_vec()).expect("non-empty tail")
}

fn polygon_mask_for(poly: &Option<PolygonRoi>, shape: (usize, usize)) -> Option<Vec<bool>> {
    poly.as_ref().map(|p| polygon_mask(p, shape.0, shape.1))
}

fn apply_mask(seq: &Sequence, poly: &Option<PolygonRoi>) -> Sequence {
    match poly {
        Some(p) => seq
            .with_frames(seq.frames().iter().map(|f| mask_polygon(f, p)).collect())
            .expect("masking keeps shape"),
        None => seq.clone(),
    }
}

/// Every step before the statistics. With `preprocessed`, frames are paired
/// one to one and only the polygon mask is applied.
pub fn prepare(seq1: &Sequence, seq2: &Sequence, config: &RunConfig) -> Result<Prepared, PipelineError> {
    let pair = validate_pair(seq1, seq2)?;
    let warnings = pair.warnings;
    let (s1, s2) = (pair.seq1, pair.seq2);

    if config.preprocessed {
        let registered = [apply_mask(&s1, &config.polygon), apply_mask(&s2, &config.polygon)];
        let mask = polygon_mask_for(&config.polygon, s1.shape());
        return Ok(Prepared {
            pairs: (0..s1.frame_count()).map(|i| (i, i)).collect(),
            original: [s1, s2],
            registered,
            mask,
            segmentation: None,
            alignment: None,
            spatial: None,
            warnings,
        });
    }

    let (c1, c2) = crop_pair(&s1, &s2, config.roi1, config.roi2).map_err(|e| PipelineError::input("crop", e.to_string()))?;
    let (groups, manual) = match config.seg {
        SegMode::Auto { groups } => (Some(groups), [None, None]),
        SegMode::Manual { c1, c2 } => (None, [Some(c1), Some(c2)]),
    };
    let seg1 = choose_threshold(&c1, groups, manual[0], config.seed)
        .map_err(|e| PipelineError::numeric("segment", format!("sequence 1: {e}")))?;
    let seg2 = choose_threshold(&c2, groups, manual[1], config.seed)
        .map_err(|e| PipelineError::numeric("segment", format!("sequence 2: {e}")))?;
    register_segmented([c1, c2], [seg1, seg2], &config.reg, &config.midline, &config.polygon, warnings)
}

/// Segments cropped sequences with the given cutoffs, aligns them in time,
/// registers them in space and applies the polygon mask.
pub fn register_segmented(
    cropped: [Sequence; 2],
    segmentation: [SegmentationOutcome; 2],
    reg: &RegMode,
    midline: &MidlineOptions,
    polygon: &Option<PolygonRoi>,
    mut warnings: Vec<Warning>,
) -> Result<Prepared, PipelineError> {
    let [c1, c2] = cropped;
    let g1 = segment_sequence(&c1, segmentation[0].threshold)?;
    let g2 = segment_sequence(&c2, segmentation[1].threshold)?;

    let alignment = temporal_align(&g1, &g2)?;
    warnings.extend(alignment.warnings.iter().cloned());
    let ex = alignment.excluded;
    let (t1, t2) = (tail(&g1, ex), tail(&g2, ex));
    let ref1 = &t1.frames()[alignment.pairs[0].0];
    let ref2 = &t2.frames()[alignment.pairs[0].1];
    let spatial = spatial_transforms(ref1, ref2, reg, midline)?;
    let r1 = apply_mask(&warp_sequence(&t1, &spatial.transforms[0]), polygon);
    let r2 = apply_mask(&warp_sequence(&t2, &spatial.transforms[1]), polygon);
    let mask = polygon_mask_for(polygon, r1.shape());

    Ok(Prepared {
        original: [tail(&c1, ex), tail(&c2, ex)],
        registered: [r1, r2],
        pairs: alignment.pairs.clone(),
        mask,
        segmentation: Some(segmentation),
        alignment: Some(alignment),
        spatial: Some(spatial),
        warnings,
    })
}

/// Hints written when the alignment check fails or is pending.
pub fn alignment_suggestions(p: &Prepared) -> Vec<String> {
    let mut out = vec![
        "Inspect the overlay: yellow marks content present in both reference frames, red only in sequence 1 and green only in sequence 2.".to_string(),
        "If the outlines disagree, adjust the segmentation cutoffs (manual mode) or the number of mixture groups.".to_string(),
        "Try manual registration with a reference point and a direction point on each sequence.".to_string(),
        "Narrow the rectangular ROI so that both crops hold the same anatomy.".to_string(),
    ];
    if let Some(a) = &p.alignment {
        if 2 * a.j_max > a.avg_cor.len() {
            out.push(format!(
                "The temporal shift {} pairs few frames; check that both recordings cover the same activity.",
                a.j_max
            ));
        }
    }
    if let Some(s) = &p.spatial {
        if let Some(m) = &s.midline {
            for (i, reg) in m.iter().enumerate() {
                if let Some(fit) = reg.fits.first() {
                    let rms = fit.rms_residual();
                    if rms > MIDLINE_RMS_WARN {
                        out.push(format!(
                            "The midline of sequence {} is curved (rms residual {rms:.2} px); manual registration may do better.",
                            i + 1
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Runs the statistics on every prepared pair.
pub fn analyze(p: &Prepared, snm: &SnmConfig) -> Result<SnmRun, StatsError> {
    let pairs: Vec<(&Frame, &Frame)> = p
        .pairs
        .iter()
        .map(|&(a, b)| (&p.registered[0].frames()[a], &p.registered[1].frames()[b]))
        .collect();
    run_snm(&pairs, p.mask.as_deref(), snm)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MovieKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    AwaitingAlignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub preprocessed: bool,
    pub thresholds: Option<[f64; 2]>,
    pub groups: Option<[usize; 2]>,
    pub excluded: Option<usize>,
    pub j_max: Option<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub transforms: Option<[RigidTransform; 2]>,
    pub bandwidths: Option<crate::stats::Bandwidths>,
    pub margin: Option<usize>,
    pub nu: Option<f64>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub sigma_hat: Vec<f64>,
    pub alpha: f64,
    pub sidedness: crate::stats::Sidedness,
    pub fdr: crate::stats::FdrMode,
    pub display: Display,
    pub pmap_dim: u8,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub status: RunStatus,
    pub parameters: Parameters,
    pub artifacts: Vec<Artifact>,
    pub warnings: Vec<Warning>,
    pub suggestions: Vec<String>,
}

impl Manifest {
    pub fn artifact(&self, kind: &str, map: Option<MovieKind>) -> impl Iterator<Item = &Artifact> + '_ {
        let kind = kind.to_string();
        self.artifacts.iter().filter(move |a| a.kind == kind && a.map == map)
    }
}

fn parameters(p: &Prepared, run: Option<&SnmRun>, config: &RunConfig) -> Parameters {
    Parameters {
        preprocessed: config.preprocessed,
        thresholds: p.segmentation.as_ref().map(|s| [s[0].threshold.c, s[1].threshold.c]),
        groups: p.segmentation.as_ref().and_then(|s| {
            Some([s[0].model.as_ref()?.groups(), s[1].model.as_ref()?.groups()])
        }),
        excluded: p.alignment.as_ref().map(|a| a.excluded),
        j_max: p.alignment.as_ref().map(|a| a.j_max),
        pairs: p.pairs.clone(),
        transforms: p.spatial.as_ref().map(|s| s.transforms),
        bandwidths: run.map(|r| r.bandwidths),
        margin: run.map(|r| r.margin),
        nu: run.map(|r| r.df.nu),
        delta1: run.map(|r| r.df.delta1),
        delta2: run.and_then(|r| r.df.delta2),
        sigma_hat: run.map(|r| r.maps.iter().map(|m| m.sigma_hat).collect()).unwrap_or_default(),
        alpha: config.snm.alpha,
        sidedness: config.snm.sidedness,
        fdr: config.snm.fdr,
        display: config.display,
        pmap_dim: config.pmap_dim,
        seed: config.seed,
    }
}

/// Writes files under an output directory and records them.
pub struct OutputWriter {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl OutputWriter {
    /// Prepares `root`: creates it, or clears the artifacts of a previous
    /// run recorded in its manifest. Refuses directories holding other files.
    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        let io = |e: std::io::Error| PipelineError::input("output", format!("{}: {e}", root.display()));
        std::fs::create_dir_all(root).map_err(io)?;
        let manifest_path = root.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path).map_err(io)?;
            let old: Manifest = serde_json::from_str(&text)
                .map_err(|e| PipelineError::input("output", format!("unreadable previous manifest: {e}")))?;
            for a in &old.artifacts {
                let p = root.join(&a.path);
                if p.is_file() {
                    std::fs::remove_file(&p).map_err(io)?;
                }
            }
            remove_empty_dirs(root).map_err(io)?;
        }
        if std::fs::read_dir(root).map_err(io)?.next().is_some() {
            return Err(PipelineError::input(
                "output",
                format!("{} is not empty and holds no previous run", root.display()),
            ));
        }
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    fn record(&mut self, p: &Path, kind: &str, map: Option<MovieKind>, frame: Option<usize>) {
        let path = self.rel(p);
        self.artifacts.push(Artifact {
            path,
            kind: kind.into(),
            map,
            frame,
        });
    }

    fn write_text(&mut self, rel: &str, text: &str, kind: &str, map: Option<MovieKind>, frame: Option<usize>) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| PipelineError::input("output", e.to_string()))?;
        }
        std::fs::write(&path, text).map_err(|e| PipelineError::input("output", format!("{}: {e}", path.display())))?;
        self.record(&path, kind, map, frame);
        Ok(())
    }

    pub fn write_png(&mut self, rel: &str, img: &image::RgbImage, kind: &str) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        write_png(img, &path)?;
        self.record(&path, kind, None, None);
        Ok(())
    }

    pub fn write_movie(&mut self, kind: MovieKind, frames: &[image::RgbImage], delay_ms: u32) -> Result<(), PipelineError> {
        let spec = MovieSpec {
            frame_delay_ms: delay_ms,
            ..MovieSpec::new(kind)
        };
        let path = self.root.join("movies").join(format!("{}.gif", kind.as_str()));
        let written = encode_movie(frames, &spec, &path)?;
        for (i, p) in written.iter().enumerate() {
            if i == 0 {
                self.record(p, "movie", Some(kind), None);
            } else {
                self.record(p, "movie_frame", Some(kind), Some(i - 1));
            }
        }
        Ok(())
    }

    pub fn write_map_csv(&mut self, kind: MovieKind, index: usize, frame: &Frame) -> Result<(), PipelineError> {
        let name = kind.as_str();
        let rel = format!("maps/{name}/{name}_{index:04}.csv");
        self.write_text(&rel, &write_frame(frame, &format!("{name} {index}")), "csv", Some(kind), Some(index))
    }

    pub fn write_height_field(&mut self, index: usize, frame: &Frame) -> Result<(), PipelineError> {
        let rel = format!("maps/P3D/P_{index:04}.json");
        let json = serde_json::to_string(&HeightField::from_frame(frame)).expect("height field serialises");
        self.write_text(&rel, &json, "height_field", Some(MovieKind::P), Some(index))
    }

    /// Writes the manifest, listing itself, and returns it.
    pub fn finish(mut self, status: RunStatus, parameters: Parameters, warnings: Vec<Warning>, suggestions: Vec<String>) -> Result<Manifest, PipelineError> {
        let path = self.root.join(MANIFEST_FILE);
        self.record(&path, "manifest", None, None);
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            status,
            parameters,
            artifacts: self.artifacts,
            warnings,
            suggestions,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        std::fs::write(&path, json).map_err(|e| PipelineError::input("output", format!("{}: {e}", path.display())))?;
        Ok(manifest)
    }
}

fn remove_empty_dirs(dir: &Path) -> std::io::Result<bool> {
    let mut empty = true;
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() && remove_empty_dirs(&path)? {
            std::fs::remove_dir(&path)?;
        } else {
            empty = false;
        }
    }
    Ok(empty)
}

/// Sequence range shared by every frame of a movie.
fn shared_range(frames: &[&Frame], spec: ColorMapSpec) -> ColorMapSpec {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for f in frames {
        let (a, b) = f.min_max();
        lo = lo.min(a);
        hi = hi.max(b);
    }
    let range = match spec.kind {
        ColorMapKind::DivergingBlueRed => {
            let m = lo.abs().max(hi.abs());
            if m > 0.0 {
                ValueRange::Fixed(-m, m)
            } else {
                ValueRange::Auto
            }
        }
        _ if hi > lo => ValueRange::Fixed(lo, hi),
        _ => ValueRange::Auto,
    };
    ColorMapSpec { range, ..spec }
}

pub fn render_frames(frames: &[&Frame], kind: MovieKind, significant: Option<&[&[bool]]>, zoom: u32) -> Result<Vec<image::RgbImage>, RenderError> {
    let spec = match kind {
        MovieKind::P => kind.color_map(),
        _ => shared_range(frames, kind.color_map()),
    };
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| Ok(upscale(&render_heatmap(f, &spec, significant.map(|s| s[i]))?, zoom)))
        .collect()
}

/// Writes maps, movies and height fields for a finished analysis.
pub fn write_outputs(out: &mut OutputWriter, p: &Prepared, run: &SnmRun, config: &RunConfig) -> Result<(), PipelineError> {
    let kinds: &[MovieKind] = match config.display {
        Display::Basic => &[MovieKind::P],
        Display::All => &MovieKind::ALL,
    };
    for &kind in kinds {
        let frames: Vec<&Frame> = match kind {
            MovieKind::O1 => p.original[0].frames().iter().collect(),
            MovieKind::O2 => p.original[1].frames().iter().collect(),
            MovieKind::R1 => p.registered[0].frames().iter().collect(),
            MovieKind::R2 => p.registered[1].frames().iter().collect(),
            MovieKind::D => run.maps.iter().map(|m| &m.d).collect(),
            MovieKind::S => run.maps.iter().map(|m| &m.s).collect(),
            MovieKind::T => run.maps.iter().map(|m| &m.t).collect(),
            MovieKind::P => run.maps.iter().map(|m| &m.adjusted).collect(),
        };
        if matches!(kind, MovieKind::D | MovieKind::S | MovieKind::T | MovieKind::P) {
            for (i, f) in frames.iter().enumerate() {
                out.write_map_csv(kind, i, f)?;
            }
        }
        let sig: Vec<&[bool]> = run.maps.iter().map(|m| m.significant.as_slice()).collect();
        let images = render_frames(&frames, kind, (kind == MovieKind::P).then_some(sig.as_slice()), config.zoom)?;
        out.write_movie(kind, &images, config.frame_delay_ms)?;
    }
    if config.pmap_dim == 3 {
        for (i, m) in run.maps.iter().enumerate() {
            out.write_height_field(i, &m.adjusted)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub snm: Option<SnmRun>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        match self.manifest.status {
            RunStatus::Completed => 0,
            RunStatus::AwaitingAlignment => 3,
        }
    }
}

/// Scans both files and runs every stage inside a thread pool sized by the
/// config.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads())
        .build()
        .map_err(|e| PipelineError::input("config", e.to_string()))?;
    pool.install(|| {
        let a = scan_file(&config.file1, &config.scan, "sequence 1")?;
        let b = scan_file(&config.file2, &config.scan, "sequence 2")?;
        let mut warnings: Vec<Warning> = a.warnings.into_iter().chain(b.warnings).collect();
        run_sequences(&a.sequence, &b.sequence, config, &mut warnings)
    })
}

/// Runs every stage on sequences already in memory.
pub fn run_sequences(
    seq1: &Sequence,
    seq2: &Sequence,
    config: &RunConfig,
    warnings: &mut Vec<Warning>,
) -> Result<RunOutcome, PipelineError> {
    let prepared = prepare(seq1, seq2, config)?;
    warnings.extend(prepared.warnings.iter().cloned());
    if !config.preprocessed && !config.assume_aligned {
        let mut out = OutputWriter::open(&config.out_dir)?;
        write_overlay(&mut out, &prepared, config.zoom)?;
        let manifest = out.finish(
            RunStatus::AwaitingAlignment,
            parameters(&prepared, None, config),
            warnings.clone(),
            alignment_suggestions(&prepared),
        )?;
        return Ok(RunOutcome { manifest, snm: None });
    }
    analyze_and_write(&prepared, config, warnings)
}

pub fn write_overlay(out: &mut OutputWriter, p: &Prepared, zoom: u32) -> Result<(), PipelineError> {
    let (ref1, ref2) = p.reference_frames();
    let overlay = upscale(&overlay_check(ref1, ref2)?, zoom);
    out.write_png(OVERLAY_FILE, &overlay, "overlay")
}

/// Runs the statistics on accepted, prepared frames and writes every
/// output plus a completed manifest into `config.out_dir`.
pub fn analyze_and_write(p: &Prepared, config: &RunConfig, warnings: &mut Vec<Warning>) -> Result<RunOutcome, PipelineError> {
    let mut out = OutputWriter::open(&config.out_dir)?;
    write_overlay(&mut out, p, config.zoom)?;
    let mut snm = config.snm.clone();
    snm.cv.seed = config.seed;
    snm.df.seed = config.seed;
    let run = analyze(p, &snm)?;
    warnings.extend(run.warnings.iter().cloned());
    write_outputs(&mut out, p, &run, config)?;
    let manifest = out.finish(RunStatus::Completed, parameters(p, Some(&run), config), warnings.clone(), vec![])?;
    Ok(RunOutcome { manifest, snm: Some(run) })
}
