//! Session state machine and the in-memory store.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use seqmap_core::ingest::ScanSpec;
use seqmap_core::model::{PixelCoord, PolygonRoi, RectRoi, Sequence, Warning};
use seqmap_core::pipeline::{Manifest, Prepared, SegmentationOutcome};
use seqmap_core::stats::SnmRun;

use crate::error::ApiError;

pub const SESSION_FILE: &str = "session.json";
pub const OUTPUT_DIR: &str = "output";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Created,
    Scanned,
    Cropped,
    Segmented,
    Registered,
    Confirmed,
    Analyzed,
    Failed,
}

/// What the client asked for at each step, echoed back unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Selections {
    pub roi1: Option<RectRoi>,
    pub roi2: Option<RectRoi>,
    pub segment: Option<SegmentRequest>,
    pub register: Option<RegisterRequest>,
    pub analyze: Option<AnalyzeRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SegmentRequest {
    Auto {
        #[serde(default)]
        groups: Option<usize>,
    },
    Manual {
        c1: f64,
        c2: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterRequest {
    #[serde(flatten)]
    pub mode: RegisterMode,
    #[serde(default)]
    pub polygon: Option<PolygonRoi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum RegisterMode {
    Auto,
    /// Reference and direction point on sequence 1, then on sequence 2.
    Manual { points: [PixelCoord; 4] },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub sidedness: Option<seqmap_core::stats::Sidedness>,
    #[serde(default)]
    pub display: Option<seqmap_core::pipeline::Display>,
    #[serde(default)]
    pub pmap_dim: Option<u8>,
    #[serde(default)]
    pub bandwidths: Option<Vec<seqmap_core::stats::Bandwidths>>,
    #[serde(default)]
    pub fdr: Option<seqmap_core::stats::FdrMode>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Everything known about one session. Heavy members are shared so a
/// snapshot is cheap to clone.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub id: String,
    pub state: SessionState,
    pub created_at: u64,
    pub updated_at: u64,
    pub seed: u64,
    pub read_only: bool,
    pub busy: Option<String>,
    pub scan: [Option<ScanSpec>; 2],
    pub raw: [Option<Arc<Sequence>>; 2],
    pub cropped: Option<Arc<[Sequence; 2]>>,
    pub segmentation: Option<Arc<[SegmentationOutcome; 2]>>,
    pub prepared: Option<Arc<Prepared>>,
    pub run: Option<Arc<SnmRun>>,
    pub manifest: Option<Manifest>,
    pub selections: Selections,
    pub suggestions: Vec<String>,
    pub warnings: Vec<Warning>,
    pub dir: PathBuf,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// The part of a session written to `session.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersistedSession {
    pub id: String,
    pub state: SessionState,
    pub created_at: u64,
    pub updated_at: u64,
    pub seed: u64,
    pub scan: [Option<ScanSpec>; 2],
    pub selections: Selections,
    pub suggestions: Vec<String>,
    pub warnings: Vec<Warning>,
    pub manifest: Option<Manifest>,
}

impl SessionData {
    pub fn new(id: String, seed: u64, dir: PathBuf) -> Self {
        let t = now_ms();
        Self {
            id,
            state: SessionState::Created,
            created_at: t,
            updated_at: t,
            seed,
            read_only: false,
            busy: None,
            scan: [None, None],
            raw: [None, None],
            cropped: None,
            segmentation: None,
            prepared: None,
            run: None,
            manifest: None,
            selections: Selections::default(),
            suggestions: Vec::new(),
            warnings: Vec::new(),
            dir,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.dir.join(OUTPUT_DIR)
    }

    pub fn persisted(&self) -> PersistedSession {
        PersistedSession {
            id: self.id.clone(),
            state: self.state,
            created_at: self.created_at,
            updated_at: self.updated_at,
            seed: self.seed,
            scan: self.scan.clone(),
            selections: self.selections.clone(),
            suggestions: self.suggestions.clone(),
            warnings: self.warnings.clone(),
            manifest: self.manifest.clone(),
        }
    }

    pub fn restore(p: PersistedSession, dir: PathBuf) -> Self {
        Self {
            state: p.state,
            created_at: p.created_at,
            updated_at: p.updated_at,
            read_only: true,
            scan: p.scan,
            manifest: p.manifest,
            selections: p.selections,
            suggestions: p.suggestions,
            warnings: p.warnings,
            ..Self::new(p.id, p.seed, dir)
        }
    }

    /// Fails with 409 unless the session is writable and in one of `from`.
    pub fn require(&self, action: &'static str, from: &[SessionState]) -> Result<(), ApiError> {
        if self.read_only {
            return Err(ApiError::ReadOnly);
        }
        if !from.contains(&self.state) {
            return Err(ApiError::Conflict {
                action,
                state: self.state,
            });
        }
        Ok(())
    }
}

/// One session: a writer lock serialising mutations and a snapshot that
/// readers clone without waiting for them.
pub struct SessionHandle {
    pub writer: Mutex<()>,
    snapshot: RwLock<Arc<SessionData>>,
}

impl SessionHandle {
    pub fn new(data: SessionData) -> Self {
        Self {
            writer: Mutex::new(()),
            snapshot: RwLock::new(Arc::new(data)),
        }
    }

    pub fn snapshot(&self) -> Arc<SessionData> {
        self.snapshot.read().expect("session lock poisoned").clone()
    }

    /// Replaces the snapshot and persists it. Callers hold `writer`.
    pub fn publish(&self, mut data: SessionData, persist: bool) -> Arc<SessionData> {
        data.updated_at = now_ms();
        if persist {
            if let Err(e) = write_session_file(&data) {
                log::warn!("could not persist session {}: {e}", data.id);
            }
        }
        let data = Arc::new(data);
        *self.snapshot.write().expect("session lock poisoned") = data.clone();
        data
    }
}

fn write_session_file(data: &SessionData) -> std::io::Result<()> {
    std::fs::create_dir_all(&data.dir)?;
    let json = serde_json::to_string_pretty(&data.persisted()).map_err(std::io::Error::other)?;
    std::fs::write(data.dir.join(SESSION_FILE), json)
}

#[derive(Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

impl SessionStore {
    pub fn insert(&self, data: SessionData) -> Arc<SessionHandle> {
        let id = data.id.clone();
        let handle = Arc::new(SessionHandle::new(data));
        self.sessions.write().expect("store lock poisoned").insert(id, handle.clone());
        handle
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .read()
            .expect("store lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("store lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads analysed sessions found under `root` as read-only sessions.
    pub fn restore_from(&self, root: &Path) -> usize {
        let Ok(entries) = std::fs::read_dir(root) else {
            return 0;
        };
        let mut restored = 0;
        for entry in entries.flatten() {
            let dir = entry.path();
            let Ok(text) = std::fs::read_to_string(dir.join(SESSION_FILE)) else {
                continue;
            };
            match serde_json::from_str::<PersistedSession>(&text) {
                Ok(p) if p.state == SessionState::Analyzed => {
                    self.insert(SessionData::restore(p, dir));
                    restored += 1;
                }
                Ok(_) => {}
                Err(e) => log::warn!("skipping {}: {e}", dir.display()),
            }
        }
        restored
    }
}
