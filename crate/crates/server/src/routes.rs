//! Route table and handlers.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use seqmap_core::ingest::{scan_str, ScanSpec};
use seqmap_core::model::{validate_pair, Frame, PixelCoord, RectRoi, Sequence, Warning};
use seqmap_core::pipeline::{
    alignment_suggestions, analyze_and_write, choose_threshold, crop_pair, register_segmented, Artifact, Manifest,
    RegMode, RunConfig, SegMode,
};
use seqmap_core::registration::{excluded_count, MidlineOptions, RigidTransform};
use seqmap_core::render::{overlay_check, upscale, write_png, HeightField, MovieKind, DEFAULT_ZOOM};
use seqmap_core::segmentation::{apply_threshold, histogram, GroupCount, HistogramSummary};
use seqmap_core::stats::SnmConfig;

use crate::error::ApiError;
use crate::payload::FramePayload;
use crate::session::{
    AnalyzeRequest, RegisterMode, RegisterRequest, SegmentRequest, Selections, SessionData, SessionHandle,
    SessionState, OUTPUT_DIR,
};
use crate::AppState;

use SessionState::*;

/// Uploads are whole CSV files.
const BODY_LIMIT: usize = 512 * 1024 * 1024;
pub const DEFAULT_NBINS: usize = 64;
pub const OVERLAY_FILE: &str = "overlay.png";

pub fn api(state: AppState) -> Router {
    let ui = state.config.ui_dir.clone();
    let router = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/upload", post(upload))
        .route("/sessions/{id}/roi", post(roi))
        .route("/sessions/{id}/histogram", get(get_histogram))
        .route("/sessions/{id}/segment", post(segment))
        .route("/sessions/{id}/register", post(register))
        .route("/sessions/{id}/overlay", get(overlay))
        .route("/sessions/{id}/confirm", post(confirm))
        .route("/sessions/{id}/analyze", post(analyze))
        .route("/sessions/{id}/maps/{kind}/{frame}", get(map_frame))
        .route("/sessions/{id}/heightfield/{frame}", get(height_field))
        .route("/sessions/{id}/movies/{kind}", get(movie))
        .route("/sessions/{id}/movies/{kind}/{frame}", get(movie_frame))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    match ui {
        Some(dir) => router.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => router.fallback(not_found),
    }
}

async fn not_found() -> ApiError {
    ApiError::NotFound("route".into())
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::Internal(e.to_string())
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(t)| t).map_err(|e| ApiError::Invalid(e.body_text()))
}

fn path<T>(p: Result<Path<T>, PathRejection>) -> Result<T, ApiError> {
    p.map(|Path(t)| t).map_err(|e| ApiError::Invalid(e.body_text()))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::Invalid(format!("malformed request body: {e}")))
}

/// Runs a mutation on a private copy of the session under its writer lock
/// and publishes the copy only if the mutation succeeds, so a rejected call
/// leaves the session untouched.
async fn mutate<R, F>(state: &AppState, id: &str, f: F) -> Result<(Arc<SessionData>, R), ApiError>
where
    R: Send + 'static,
    F: FnOnce(&mut SessionData) -> Result<R, ApiError> + Send + 'static,
{
    let handle = state.store.get(id)?;
    let _guard = handle.writer.lock().await;
    let mut data = (*handle.snapshot()).clone();
    let (data, r) = tokio::task::spawn_blocking(move || f(&mut data).map(|r| (data, r)))
        .await
        .map_err(internal)??;
    Ok((handle.publish(data, state.config.persist), r))
}

fn reference_index(n: usize) -> usize {
    excluded_count(n).min(n.saturating_sub(1))
}

// Session view

#[derive(Serialize)]
pub struct HealthView {
    pub status: &'static str,
    pub version: &'static str,
    pub sessions: usize,
}

async fn health(State(state): State<AppState>) -> Json<HealthView> {
    Json(HealthView {
        status: "ok",
        version: env!("CARGO_PKG_VERSION"),
        sessions: state.store.len(),
    })
}

#[derive(Serialize)]
pub struct RegistrationView {
    pub transforms: Option<[RigidTransform; 2]>,
    pub excluded: Option<usize>,
    pub j_max: Option<usize>,
    pub pair_count: usize,
}

#[derive(Serialize)]
pub struct SessionView {
    pub id: String,
    pub state: SessionState,
    pub busy: Option<String>,
    pub read_only: bool,
    pub created_at: u64,
    pub updated_at: u64,
    pub seed: u64,
    pub frame_counts: [Option<usize>; 2],
    pub shape: Option<(usize, usize)>,
    pub selections: Selections,
    pub thresholds: Option<[f64; 2]>,
    pub registration: Option<RegistrationView>,
    pub suggestions: Vec<String>,
    pub warnings: Vec<Warning>,
    pub manifest: Option<Manifest>,
}

impl SessionView {
    fn of(d: &SessionData) -> Self {
        let params = d.manifest.as_ref().map(|m| &m.parameters);
        let registration = match (&d.prepared, params) {
            (Some(p), _) => Some(RegistrationView {
                transforms: p.spatial.as_ref().map(|s| s.transforms),
                excluded: p.alignment.as_ref().map(|a| a.excluded),
                j_max: p.alignment.as_ref().map(|a| a.j_max),
                pair_count: p.pairs.len(),
            }),
            (None, Some(m)) => Some(RegistrationView {
                transforms: m.transforms,
                excluded: m.excluded,
                j_max: m.j_max,
                pair_count: m.pairs.len(),
            }),
            _ => None,
        };
        let shape = d
            .cropped
            .as_ref()
            .map(|c| c[0].shape())
            .or_else(|| d.raw[0].as_ref().map(|s| s.shape()));
        Self {
            id: d.id.clone(),
            state: d.state,
            busy: d.busy.clone(),
            read_only: d.read_only,
            created_at: d.created_at,
            updated_at: d.updated_at,
            seed: d.seed,
            frame_counts: [0, 1].map(|i| d.raw[i].as_ref().map(|s| s.frame_count())),
            shape,
            selections: d.selections.clone(),
            thresholds: d
                .segmentation
                .as_ref()
                .map(|s| [s[0].threshold.c, s[1].threshold.c])
                .or_else(|| params.and_then(|m| m.thresholds)),
            registration,
            suggestions: d.suggestions.clone(),
            warnings: d.warnings.clone(),
            manifest: d.manifest.clone(),
        }
    }
}

#[derive(Deserialize, Default)]
struct CreateRequest {
    #[serde(default)]
    seed: u64,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let req: CreateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        CreateRequest::default()
    } else {
        parse_json(&body)?
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let dir = state.config.session_dir.join(&id);
    let handle = state.store.insert(SessionData::new(id, req.seed, dir));
    let snap = handle.publish((*handle.snapshot()).clone(), state.config.persist);
    Ok((StatusCode::CREATED, Json(SessionView::of(&snap))))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(SessionView::of(&state.store.get(&id)?.snapshot())))
}

// Upload

#[derive(Deserialize)]
struct UploadQuery {
    which: u8,
    scan: String,
    nframe: usize,
    nrow: usize,
    ncol: usize,
    #[serde(default)]
    row_id: Option<String>,
    #[serde(default)]
    col_id: Option<usize>,
}

fn which_index(which: u8) -> Result<usize, ApiError> {
    match which {
        1 | 2 => Ok(which as usize - 1),
        _ => Err(ApiError::Invalid(format!("which must be 1 or 2, got {which}"))),
    }
}

/// Parses the scan layout names used on the command line.
pub fn scan_spec(scan: &str, nframe: usize, nrow: usize, ncol: usize, row_id: Option<String>, col_id: Option<usize>) -> Result<ScanSpec, String> {
    let spec = match scan {
        "blank" => ScanSpec::blank(nframe, nrow, ncol),
        "row" => ScanSpec::row_id(nframe, nrow, ncol, row_id.unwrap_or_default()),
        "col" => ScanSpec::col_id(nframe, nrow, ncol, col_id.unwrap_or(0)),
        other => return Err(format!("unknown scan layout {other:?}; expected row, col or blank")),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

#[derive(Serialize)]
pub struct UploadView {
    pub which: u8,
    pub frame_count: usize,
    pub rows: usize,
    pub cols: usize,
    pub reference_index: usize,
    pub reference: FramePayload,
    pub warnings: Vec<Warning>,
    pub state: SessionState,
}

fn clear_downstream(d: &mut SessionData) {
    d.cropped = None;
    d.segmentation = None;
    d.prepared = None;
    d.run = None;
    d.manifest = None;
    d.suggestions.clear();
    let roi = (d.selections.roi1, d.selections.roi2);
    d.selections = Selections::default();
    if d.state >= Cropped {
        (d.selections.roi1, d.selections.roi2) = roi;
    }
}

async fn upload(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<UploadQuery>, QueryRejection>,
    body: Bytes,
) -> Result<Json<UploadView>, ApiError> {
    let q = query(q)?;
    let k = which_index(q.which)?;
    let spec = scan_spec(&q.scan, q.nframe, q.nrow, q.ncol, q.row_id, q.col_id).map_err(ApiError::Invalid)?;
    let text = String::from_utf8(body.to_vec()).map_err(|_| ApiError::Invalid("upload is not UTF-8 text".into()))?;
    let (_, view) = mutate(&state, &id, move |d| {
        d.require("upload", &[Created, Scanned])?;
        let report = scan_str(&text, &spec, &format!("upload {}", q.which), &format!("sequence {}", q.which))
            .map_err(|e| ApiError::Invalid(e.to_string()))?;
        let seq = report.sequence;
        if let Some(other) = &d.raw[1 - k] {
            if other.shape() != seq.shape() {
                return Err(ApiError::Invalid(format!(
                    "frame shape {:?} differs from the other sequence's {:?}",
                    seq.shape(),
                    other.shape()
                )));
            }
        }
        let n = seq.frame_count();
        let r = reference_index(n);
        let view = UploadView {
            which: q.which,
            frame_count: n,
            rows: seq.shape().0,
            cols: seq.shape().1,
            reference_index: r,
            reference: FramePayload::encode(&seq.frames()[r]),
            warnings: report.warnings.clone(),
            state: Created,
        };
        d.raw[k] = Some(Arc::new(seq));
        d.scan[k] = Some(spec);
        d.state = if d.raw.iter().all(Option::is_some) { Scanned } else { Created };
        clear_downstream(d);
        d.warnings.retain(|w| w.stage != format!("scan {}", q.which));
        d.warnings.extend(report.warnings.into_iter().map(|w| Warning::new(format!("scan {}", q.which), w.message)));
        Ok(UploadView { state: d.state, ..view })
    })
    .await?;
    Ok(Json(view))
}

// ROI

#[derive(Deserialize)]
struct RoiRequest {
    #[serde(default)]
    roi1: Option<RectRoi>,
    #[serde(default)]
    roi2: Option<RectRoi>,
}

#[derive(Serialize)]
pub struct PairView {
    pub frame_count: usize,
    pub reference_index: usize,
    pub reference1: FramePayload,
    pub reference2: FramePayload,
}

#[derive(Serialize)]
pub struct RoiView {
    pub roi1: Option<RectRoi>,
    pub roi2: Option<RectRoi>,
    #[serde(flatten)]
    pub pair: PairView,
    pub state: SessionState,
}

fn pair_view(a: &Frame, b: &Frame, frame_count: usize, reference_index: usize) -> PairView {
    PairView {
        frame_count,
        reference_index,
        reference1: FramePayload::encode(a),
        reference2: FramePayload::encode(b),
    }
}

fn raw_pair(d: &SessionData) -> Result<(Sequence, Sequence, Vec<Warning>), ApiError> {
    let (Some(a), Some(b)) = (&d.raw[0], &d.raw[1]) else {
        return Err(ApiError::Conflict {
            action: "crop before both uploads",
            state: d.state,
        });
    };
    let p = validate_pair(a, b).map_err(|e| ApiError::Invalid(e.to_string()))?;
    Ok((p.seq1, p.seq2, p.warnings))
}

async fn roi(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<RoiView>, ApiError> {
    let req: RoiRequest = parse_json(&body)?;
    let (_, view) = mutate(&state, &id, move |d| {
        d.require("select a region", &[Scanned, Cropped])?;
        let (s1, s2, warnings) = raw_pair(d)?;
        let (c1, c2) = crop_pair(&s1, &s2, req.roi1, req.roi2).map_err(|e| ApiError::Invalid(e.to_string()))?;
        let n = c1.frame_count();
        let r = reference_index(n);
        let pair = pair_view(&c1.frames()[r], &c2.frames()[r], n, r);
        d.state = Cropped;
        d.cropped = Some(Arc::new([c1, c2]));
        d.segmentation = None;
        d.prepared = None;
        d.run = None;
        d.manifest = None;
        d.suggestions.clear();
        d.selections = Selections {
            roi1: req.roi1,
            roi2: req.roi2,
            ..Selections::default()
        };
        d.warnings.retain(|w| w.stage.starts_with("scan"));
        d.warnings.extend(warnings);
        Ok(RoiView {
            roi1: req.roi1,
            roi2: req.roi2,
            pair,
            state: Cropped,
        })
    })
    .await?;
    Ok(Json(view))
}

// Histogram

#[derive(Deserialize)]
struct HistogramQuery {
    which: u8,
    #[serde(default)]
    nbins: Option<usize>,
}

async fn get_histogram(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<HistogramQuery>, QueryRejection>,
) -> Result<Json<HistogramSummary>, ApiError> {
    let q = query(q)?;
    let k = which_index(q.which)?;
    let nbins = q.nbins.unwrap_or(DEFAULT_NBINS);
    if !(2..=4096).contains(&nbins) {
        return Err(ApiError::Invalid(format!("nbins must be in 2..=4096, got {nbins}")));
    }
    let d = state.store.get(&id)?.snapshot();
    let seq: Sequence = match (&d.cropped, &d.raw[k]) {
        (Some(c), _) => c[k].clone(),
        (None, Some(s)) => (**s).clone(),
        (None, None) => {
            return Err(ApiError::Conflict {
                action: "build a histogram before upload",
                state: d.state,
            })
        }
    };
    let summary = tokio::task::spawn_blocking(move || {
        let pixels: Vec<f64> = seq.frames().iter().flat_map(|f| f.values().iter().copied()).collect();
        histogram(&pixels, nbins)
    })
    .await
    .map_err(internal)?
    .map_err(|e| ApiError::Invalid(e.to_string()))?;
    Ok(Json(summary))
}

// Segmentation

#[derive(Serialize)]
pub struct SegmentView {
    #[serde(flatten)]
    pub request: SegmentRequest,
    pub thresholds: [f64; 2],
    /// Mixture components chosen per sequence; `None` for manual cutoffs.
    pub fitted_groups: Option<[usize; 2]>,
    #[serde(flatten)]
    pub pair: PairView,
    pub state: SessionState,
}

async fn segment(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<SegmentView>, ApiError> {
    let req: SegmentRequest = parse_json(&body)?;
    let (groups, manual) = match req {
        SegmentRequest::Auto { groups: None } => (Some(GroupCount::Auto), [None, None]),
        SegmentRequest::Auto { groups: Some(g) } if (2..=5).contains(&g) => (Some(GroupCount::Fixed(g)), [None, None]),
        SegmentRequest::Auto { groups: Some(g) } => {
            return Err(ApiError::Invalid(format!("groups must be in 2..=5, got {g}")))
        }
        SegmentRequest::Manual { c1, c2 } if c1.is_finite() && c2.is_finite() => (None, [Some(c1), Some(c2)]),
        SegmentRequest::Manual { .. } => return Err(ApiError::Invalid("cutoffs must be finite".into())),
    };
    let (_, view) = mutate(&state, &id, move |d| {
        d.require("segment", &[Cropped, Segmented])?;
        let cropped = d.cropped.clone().expect("cropped state has frames");
        let mut outcomes = Vec::with_capacity(2);
        for k in 0..2 {
            let o = choose_threshold(&cropped[k], groups, manual[k], d.seed).map_err(|e| ApiError::Numeric {
                stage: "segment".into(),
                message: format!("sequence {}: {e}", k + 1),
            })?;
            outcomes.push(o);
        }
        let outcomes: [_; 2] = outcomes.try_into().expect("two outcomes");
        let n = cropped[0].frame_count();
        let r = reference_index(n);
        let seg = [0, 1].map(|k| apply_threshold(&cropped[k].frames()[r], outcomes[k].threshold));
        let view = SegmentView {
            request: req.clone(),
            thresholds: [outcomes[0].threshold.c, outcomes[1].threshold.c],
            fitted_groups: match (&outcomes[0].model, &outcomes[1].model) {
                (Some(a), Some(b)) => Some([a.groups(), b.groups()]),
                _ => None,
            },
            pair: pair_view(&seg[0], &seg[1], n, r),
            state: Segmented,
        };
        d.state = Segmented;
        d.segmentation = Some(Arc::new(outcomes));
        d.prepared = None;
        d.run = None;
        d.manifest = None;
        d.suggestions.clear();
        d.selections.segment = Some(req);
        d.selections.register = None;
        d.selections.analyze = None;
        Ok(view)
    })
    .await?;
    Ok(Json(view))
}

// Registration

#[derive(Serialize)]
pub struct RegisterView {
    #[serde(flatten)]
    pub request: RegisterRequest,
    pub transforms: [RigidTransform; 2],
    pub excluded: usize,
    pub j_max: usize,
    pub pair_count: usize,
    pub avg_cor: Vec<f64>,
    pub overlay: String,
    #[serde(flatten)]
    pub pair: PairView,
    pub warnings: Vec<Warning>,
    pub state: SessionState,
}

async fn register(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<RegisterView>, ApiError> {
    let req: RegisterRequest = parse_json(&body)?;
    let mode = match &req.mode {
        RegisterMode::Auto => RegMode::Auto,
        RegisterMode::Manual { points } => {
            if points[0] == points[1] || points[2] == points[3] {
                return Err(ApiError::Invalid("reference and direction points coincide".into()));
            }
            RegMode::Manual {
                seq1: [points[0], points[1]],
                seq2: [points[2], points[3]],
            }
        }
    };
    let (_, view) = mutate(&state, &id, move |d| {
        d.require("register", &[Segmented, Registered])?;
        let cropped = d.cropped.clone().expect("segmented state has frames");
        let seg = d.segmentation.clone().expect("segmented state has cutoffs");
        if let Some(poly) = &req.polygon {
            let (rows, cols) = cropped[0].shape();
            let outside = |p: &PixelCoord| p.row < 0.0 || p.col < 0.0 || p.row > rows as f64 || p.col > cols as f64;
            if poly.vertices().iter().any(outside) {
                return Err(ApiError::Invalid("polygon vertex outside the cropped frame".into()));
            }
        }
        let base: Vec<Warning> = d
            .warnings
            .iter()
            .filter(|w| w.stage.starts_with("scan") || w.stage == "validate")
            .cloned()
            .collect();
        let prepared = register_segmented(
            (*cropped).clone(),
            (*seg).clone(),
            &mode,
            &MidlineOptions::default(),
            &req.polygon,
            base,
        )?;
        let (ref1, ref2) = prepared.reference_frames();
        let png = upscale(&overlay_check(ref1, ref2).map_err(internal)?, DEFAULT_ZOOM);
        std::fs::create_dir_all(&d.dir).map_err(internal)?;
        write_png(&png, &d.dir.join(OVERLAY_FILE)).map_err(internal)?;
        let alignment = prepared.alignment.clone().expect("registration aligns in time");
        let spatial = prepared.spatial.clone().expect("registration aligns in space");
        let view = RegisterView {
            request: req.clone(),
            transforms: spatial.transforms,
            excluded: alignment.excluded,
            j_max: alignment.j_max,
            pair_count: prepared.pairs.len(),
            avg_cor: alignment.avg_cor.clone(),
            overlay: format!("/sessions/{}/overlay", d.id),
            pair: pair_view(ref1, ref2, prepared.pairs.len(), 0),
            warnings: prepared.warnings.clone(),
            state: Registered,
        };
        d.warnings = prepared.warnings.clone();
        d.suggestions = alignment_suggestions(&prepared);
        d.state = Registered;
        d.prepared = Some(Arc::new(prepared));
        d.run = None;
        d.manifest = None;
        d.selections.register = Some(req);
        d.selections.analyze = None;
        Ok(view)
    })
    .await?;
    Ok(Json(view))
}

fn binary(content_type: &'static str, bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, content_type)], bytes).into_response()
}

fn read_file(path: PathBuf, what: &str) -> Result<Vec<u8>, ApiError> {
    std::fs::read(&path).map_err(|_| ApiError::NotFound(what.to_string()))
}

async fn overlay(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let d = state.store.get(&id)?.snapshot();
    let path = match &d.manifest {
        Some(m) if d.prepared.is_none() => m
            .artifact("overlay", None)
            .next()
            .map(|a| d.dir.join(OUTPUT_DIR).join(&a.path))
            .unwrap_or_else(|| d.dir.join(OVERLAY_FILE)),
        _ => d.dir.join(OVERLAY_FILE),
    };
    if d.state < Registered {
        return Err(ApiError::NotFound("overlay".into()));
    }
    Ok(binary("image/png", read_file(path, "overlay")?))
}

// Confirmation

#[derive(Deserialize)]
struct ConfirmRequest {
    accepted: bool,
}

#[derive(Serialize)]
pub struct ConfirmView {
    pub accepted: bool,
    pub state: SessionState,
    pub suggestions: Vec<String>,
}

async fn confirm(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<ConfirmView>, ApiError> {
    let req: ConfirmRequest = parse_json(&body)?;
    let (_, view) = mutate(&state, &id, move |d| {
        d.require("confirm", &[Registered])?;
        d.state = if req.accepted { Confirmed } else { Failed };
        let suggestions = if req.accepted { Vec::new() } else { d.suggestions.clone() };
        Ok(ConfirmView {
            accepted: req.accepted,
            state: d.state,
            suggestions,
        })
    })
    .await?;
    Ok(Json(view))
}

// Analysis

fn run_config(d: &SessionData, req: &AnalyzeRequest) -> Result<RunConfig, ApiError> {
    let scan = d.scan[0].clone().expect("confirmed session was scanned");
    let mut cfg = RunConfig::new("upload:1", "upload:2", scan, d.output_dir());
    cfg.roi1 = d.selections.roi1;
    cfg.roi2 = d.selections.roi2;
    cfg.seg = match d.selections.segment {
        Some(SegmentRequest::Manual { c1, c2 }) => SegMode::Manual { c1, c2 },
        Some(SegmentRequest::Auto { groups: Some(g) }) => SegMode::Auto { groups: GroupCount::Fixed(g) },
        _ => SegMode::default(),
    };
    if let Some(RegisterRequest { mode, polygon }) = &d.selections.register {
        if let RegisterMode::Manual { points } = mode {
            cfg.reg = RegMode::Manual {
                seq1: [points[0], points[1]],
                seq2: [points[2], points[3]],
            };
        }
        cfg.polygon = polygon.clone();
    }
    let mut snm = SnmConfig::default();
    if let Some(a) = req.alpha {
        snm.alpha = a;
    }
    if let Some(s) = req.sidedness {
        snm.sidedness = s;
    }
    if let Some(g) = &req.bandwidths {
        snm.grid = g.clone();
    }
    if let Some(f) = req.fdr {
        snm.fdr = f;
    }
    cfg.snm = snm;
    cfg.display = req.display.unwrap_or_default();
    cfg.pmap_dim = req.pmap_dim.unwrap_or(2);
    cfg.seed = req.seed.unwrap_or(d.seed);
    cfg.assume_aligned = true;
    cfg.parallel = true;
    cfg.validate()?;
    Ok(cfg)
}

async fn analyze(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Manifest>, ApiError> {
    let req: AnalyzeRequest = if body.iter().all(u8::is_ascii_whitespace) {
        AnalyzeRequest::default()
    } else {
        parse_json(&body)?
    };
    let handle: Arc<SessionHandle> = state.store.get(&id)?;
    let _guard = handle.writer.lock().await;
    let before = handle.snapshot();
    before.require("analyze", &[Confirmed, Analyzed])?;
    let config = run_config(&before, &req)?;

    // Readers polling the session see the analysis in progress.
    let mut busy = (*before).clone();
    busy.busy = Some("analyzing".into());
    handle.publish(busy, false);

    let prepared = before.prepared.clone().expect("confirmed session is prepared");
    let mut warnings = before.warnings.clone();
    let result = tokio::task::spawn_blocking(move || {
        let outcome = analyze_and_write(&prepared, &config, &mut warnings);
        outcome.map(|o| (o, warnings))
    })
    .await
    .map_err(internal);
    let (outcome, warnings) = match result {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => {
            handle.publish((*before).clone(), false);
            return Err(e.into());
        }
        Err(e) => {
            handle.publish((*before).clone(), false);
            return Err(e);
        }
    };
    let mut d = (*before).clone();
    d.state = Analyzed;
    d.busy = None;
    d.manifest = Some(outcome.manifest.clone());
    d.run = outcome.snm.map(Arc::new);
    d.warnings = warnings;
    d.selections.analyze = Some(req);
    handle.publish(d, state.config.persist);
    Ok(Json(outcome.manifest))
}

// Results

fn parse_kind(kind: &str) -> Result<MovieKind, ApiError> {
    MovieKind::parse(kind).ok_or_else(|| ApiError::NotFound(format!("map kind {kind}")))
}

fn artifact<'a>(d: &'a SessionData, kind: &str, map: MovieKind, frame: Option<usize>) -> Option<&'a Artifact> {
    d.manifest.as_ref()?.artifact(kind, Some(map)).find(|a| a.frame == frame)
}

/// Re-reads a map CSV written by a previous analysis.
fn read_map_csv(path: &std::path::Path) -> Option<Frame> {
    let text = std::fs::read_to_string(path).ok()?;
    let data: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).collect();
    let ncol = data.first()?.split(',').count();
    let spec = ScanSpec::blank(1, data.len(), ncol);
    scan_str(&text, &spec, &path.display().to_string(), "map").ok().map(|r| r.sequence.frames()[0].clone())
}

/// The field behind one frame of a map or movie kind.
fn field(d: &SessionData, kind: MovieKind, frame: usize) -> Result<(Frame, usize), ApiError> {
    if d.state != Analyzed {
        return Err(ApiError::Conflict {
            action: "fetch maps before analysis",
            state: d.state,
        });
    }
    let missing = || ApiError::NotFound(format!("{} frame {frame}", kind.as_str()));
    let pick = |frames: &[Frame]| frames.get(frame).cloned().map(|f| (f, frames.len())).ok_or_else(missing);
    if let (Some(run), Some(p)) = (&d.run, &d.prepared) {
        let maps = &run.maps;
        let get = |f: fn(&seqmap_core::stats::StatMaps) -> &Frame| {
            maps.get(frame).map(|m| (f(m).clone(), maps.len())).ok_or_else(missing)
        };
        return match kind {
            MovieKind::O1 => pick(p.original[0].frames()),
            MovieKind::O2 => pick(p.original[1].frames()),
            MovieKind::R1 => pick(p.registered[0].frames()),
            MovieKind::R2 => pick(p.registered[1].frames()),
            MovieKind::D => get(|m| &m.d),
            MovieKind::S => get(|m| &m.s),
            MovieKind::T => get(|m| &m.t),
            MovieKind::P => get(|m| &m.adjusted),
        };
    }
    let a = artifact(d, "csv", kind, Some(frame)).ok_or_else(missing)?;
    let count = d.manifest.as_ref().map_or(0, |m| m.artifact("csv", Some(kind)).count());
    let f = read_map_csv(&d.output_dir().join(&a.path)).ok_or_else(|| internal("unreadable map file"))?;
    Ok((f, count))
}

#[derive(Serialize)]
pub struct MapView {
    pub kind: MovieKind,
    pub frame: usize,
    pub frame_count: usize,
    #[serde(flatten)]
    pub payload: FramePayload,
}

async fn map_frame(
    State(state): State<AppState>,
    p: Result<Path<(String, String, usize)>, PathRejection>,
) -> Result<Json<MapView>, ApiError> {
    let (id, kind, frame) = path(p)?;
    let d = state.store.get(&id)?.snapshot();
    let kind = parse_kind(&kind)?;
    let (f, frame_count) = field(&d, kind, frame)?;
    Ok(Json(MapView {
        kind,
        frame,
        frame_count,
        payload: FramePayload::encode(&f),
    }))
}

async fn height_field(
    State(state): State<AppState>,
    p: Result<Path<(String, usize)>, PathRejection>,
) -> Result<Json<HeightField>, ApiError> {
    let (id, frame) = path(p)?;
    let d = state.store.get(&id)?.snapshot();
    let (f, _) = field(&d, MovieKind::P, frame)?;
    Ok(Json(HeightField::from_frame(&f)))
}

async fn movie(State(state): State<AppState>, Path((id, kind)): Path<(String, String)>) -> Result<Response, ApiError> {
    let d = state.store.get(&id)?.snapshot();
    let kind = parse_kind(&kind)?;
    let a = artifact(&d, "movie", kind, None).ok_or_else(|| ApiError::NotFound(format!("{} movie", kind.as_str())))?;
    Ok(binary("image/gif", read_file(d.output_dir().join(&a.path), "movie")?))
}

async fn movie_frame(
    State(state): State<AppState>,
    p: Result<Path<(String, String, usize)>, PathRejection>,
) -> Result<Response, ApiError> {
    let (id, kind, frame) = path(p)?;
    let d = state.store.get(&id)?.snapshot();
    let kind = parse_kind(&kind)?;
    let a = artifact(&d, "movie_frame", kind, Some(frame))
        .ok_or_else(|| ApiError::NotFound(format!("{} movie frame {frame}", kind.as_str())))?;
    Ok(binary("image/png", read_file(d.output_dir().join(&a.path), "movie frame")?))
}
