//! Extraction of frame matrices from CSV exports.
//!
//! Three layouts are understood:
//!
//! * **RowId**: a line whose first cell equals an identifier string opens a
//!   frame; the next `nrow` lines hold its rows.
//! * **ColId**: one column carries an integer frame number; lines sharing a
//!   number form one frame from their remaining cells.
//! * **Blank**: an empty line (no non-empty cells) opens a frame; the next
//!   `nrow` lines hold its rows.
//!
//! Anything before the first identifier or blank line is header and skipped.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Frame, ModelError, Sequence, Warning};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}, column {column}: cannot parse {cell:?} as a number")]
    ParseError { line: usize, column: usize, cell: String },
    #[error("frame starting at line {line} has {found} of {expected} rows")]
    TruncatedFrame { line: usize, expected: usize, found: usize },
    #[error("no frames found")]
    NoFramesFound,
    #[error("invalid scan spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    RowId,
    ColId,
    Blank,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanSpec {
    pub mode: ScanMode,
    pub nframe: usize,
    pub nrow: usize,
    pub ncol: usize,
    #[serde(default)]
    pub row_id: Option<String>,
    /// 1-based column holding the frame number.
    #[serde(default)]
    pub col_id: Option<usize>,
}

impl ScanSpec {
    pub fn blank(nframe: usize, nrow: usize, ncol: usize) -> Self {
        Self {
            mode: ScanMode::Blank,
            nframe,
            nrow,
            ncol,
            row_id: None,
            col_id: None,
        }
    }

    pub fn row_id(nframe: usize, nrow: usize, ncol: usize, id: impl Into<String>) -> Self {
        Self {
            mode: ScanMode::RowId,
            row_id: Some(id.into()),
            ..Self::blank(nframe, nrow, ncol)
        }
    }

    pub fn col_id(nframe: usize, nrow: usize, ncol: usize, col: usize) -> Self {
        Self {
            mode: ScanMode::ColId,
            col_id: Some(col),
            ..Self::blank(nframe, nrow, ncol)
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.nframe == 0 || self.nrow == 0 || self.ncol == 0 {
            return Err(IngestError::InvalidSpec(
                "nframe, nrow and ncol must be positive".into(),
            ));
        }
        match self.mode {
            ScanMode::RowId if self.row_id.as_deref().is_none_or(|s| s.trim().is_empty()) => {
                Err(IngestError::InvalidSpec("row mode needs a non-empty row id".into()))
            }
            ScanMode::ColId if self.col_id.is_none_or(|c| c == 0) => Err(IngestError::InvalidSpec(
                "column mode needs a 1-based column id".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// A scanned sequence plus anything odd noticed along the way.
#[derive(Debug, Clone)]
pub struct ScanReport {
    pub sequence: Sequence,
    pub warnings: Vec<Warning>,
}

/// Reads `path` according to `spec`.
pub fn scan_sequence(path: &Path, spec: &ScanSpec) -> Result<Sequence, IngestError> {
    scan_file(path, spec, "seq").map(|r| r.sequence)
}

pub fn scan_file(path: &Path, spec: &ScanSpec, label: &str) -> Result<ScanReport, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    scan_str(&text, spec, &path.display().to_string(), label)
}

/// Parses CSV text already in memory.
pub fn scan_str(text: &str, spec: &ScanSpec, source: &str, label: &str) -> Result<ScanReport, IngestError> {
    spec.validate()?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let lines: Vec<Vec<&str>> = text.lines().map(split_cells).collect();

    let mut raw = match spec.mode {
        ScanMode::RowId => scan_row_id(&lines, spec)?,
        ScanMode::ColId => scan_col_id(&lines, spec)?,
        ScanMode::Blank => scan_blank(&lines, spec)?,
    };
    if raw.is_empty() {
        return Err(IngestError::NoFramesFound);
    }

    let mut warnings = Vec::new();
    if raw.len() > spec.nframe {
        warnings.push(Warning::new(
            "scan",
            format!("{source}: {} frames found, keeping the first {}", raw.len(), spec.nframe),
        ));
        raw.truncate(spec.nframe);
    } else if raw.len() < spec.nframe {
        warnings.push(Warning::new(
            "scan",
            format!("{source}: expected {} frames, found {}", spec.nframe, raw.len()),
        ));
    }
    for w in &warnings {
        log::warn!("{}", w.message);
    }

    let frames = raw
        .into_iter()
        .map(|values| Frame::new(spec.nrow, spec.ncol, values))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScanReport {
        sequence: Sequence::new(frames, source, label)?,
        warnings,
    })
}

fn split_cells(line: &str) -> Vec<&str> {
    line.split(',')
        .map(|c| {
            let c = c.trim();
            c.strip_prefix('"').and_then(|c| c.strip_suffix('"')).unwrap_or(c).trim()
        })
        .collect()
}

fn is_blank(cells: &[&str]) -> bool {
    cells.iter().all(|c| c.is_empty())
}

fn parse_cell(cell: &str, line: usize, column: usize) -> Result<f64, IngestError> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IngestError::ParseError {
            line,
            column,
            cell: cell.to_string(),
        })
}

/// Reads `nrow` lines starting at index `start`, first `ncol` cells each.
fn read_block(lines: &[Vec<&str>], start: usize, spec: &ScanSpec) -> Result<Vec<f64>, IngestError> {
    let available = lines.len().saturating_sub(start);
    if available < spec.nrow {
        return Err(IngestError::TruncatedFrame {
            line: start + 1,
            expected: spec.nrow,
            found: available,
        });
    }
    let mut values = Vec::with_capacity(spec.nrow * spec.ncol);
    for (k, cells) in lines[start..start + spec.nrow].iter().enumerate() {
        let line = start + k + 1;
        for column in 0..spec.ncol {
            let cell = cells.get(column).copied().unwrap_or("");
            values.push(parse_cell(cell, line, column + 1)?);
        }
    }
    Ok(values)
}

fn scan_row_id(lines: &[Vec<&str>], spec: &ScanSpec) -> Result<Vec<Vec<f64>>, IngestError> {
    let id = spec.row_id.as_deref().unwrap_or_default().trim();
    let mut frames = Vec::new();
    let mut k = 0;
    while k < lines.len() {
        if lines[k].first().copied() == Some(id) {
            frames.push(read_block(lines, k + 1, spec)?);
            k += 1 + spec.nrow;
        } else {
            k += 1;
        }
    }
    Ok(frames)
}

fn scan_blank(lines: &[Vec<&str>], spec: &ScanSpec) -> Result<Vec<Vec<f64>>, IngestError> {
    let mut frames = Vec::new();
    let mut k = 0;
    while k < lines.len() {
        if is_blank(&lines[k]) {
            // A run of blank lines opens a single frame.
            while k < lines.len() && is_blank(&lines[k]) {
                k += 1;
            }
            if k == lines.len() {
                break;
            }
            frames.push(read_block(lines, k, spec)?);
            k += spec.nrow;
        } else {
            k += 1;
        }
    }
    Ok(frames)
}

fn frame_number(cell: &str) -> Option<i64> {
    let v: f64 = cell.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9e15).then_some(v as i64)
}

fn scan_col_id(lines: &[Vec<&str>], spec: &ScanSpec) -> Result<Vec<Vec<f64>>, IngestError> {
    let col = spec.col_id.unwrap_or(1) - 1;
    let cells_per_frame = spec.nrow * spec.ncol;
    // (frame number, first line, values)
    let mut groups: Vec<(i64, usize, Vec<f64>)> = Vec::new();
    let mut started = false;
    for (k, cells) in lines.iter().enumerate() {
        let line = k + 1;
        let id = cells.get(col).and_then(|c| frame_number(c));
        let Some(id) = id else {
            if started && !is_blank(cells) {
                return Err(IngestError::ParseError {
                    line,
                    column: col + 1,
                    cell: cells.get(col).copied().unwrap_or("").to_string(),
                });
            }
            continue;
        };
        started = true;
        let idx = match groups.iter().position(|g| g.0 == id) {
            Some(i) => i,
            None => {
                groups.push((id, line, Vec::with_capacity(cells_per_frame)));
                groups.len() - 1
            }
        };
        let values = &mut groups[idx].2;
        for (c, cell) in cells.iter().enumerate() {
            if c == col {
                continue;
            }
            values.push(parse_cell(cell, line, c + 1)?);
        }
        if values.len() > cells_per_frame {
            return Err(IngestError::ParseError {
                line,
                column: cells.len(),
                cell: format!("frame {id} has more than {cells_per_frame} values"),
            });
        }
    }
    groups
        .into_iter()
        .map(|(_, line, values)| {
            if values.len() < cells_per_frame {
                Err(IngestError::TruncatedFrame {
                    line,
                    expected: spec.nrow,
                    found: values.len() / spec.ncol,
                })
            } else {
                Ok(values)
            }
        })
        .collect()
}

/// Serialises a sequence in the requested layout. Values use Rust's
/// shortest round-trip formatting, so re-scanning is bit-exact.
pub fn write_sequence(seq: &Sequence, spec: &ScanSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# exported,{},{} frames", seq.label, seq.frame_count());
    let col = spec.col_id.unwrap_or(1).max(1) - 1;
    for (k, frame) in seq.frames().iter().enumerate() {
        match spec.mode {
            ScanMode::Blank => out.push('\n'),
            ScanMode::RowId => {
                let _ = writeln!(out, "{}", spec.row_id.as_deref().unwrap_or("FRAME"));
            }
            ScanMode::ColId => {}
        }
        for i in 0..frame.rows() {
            let mut cells: Vec<String> = frame.row(i).iter().map(|v| format!("{v:?}")).collect();
            if spec.mode == ScanMode::ColId {
                cells.insert(col.min(cells.len()), (k + 1).to_string());
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    out
}

/// One frame in the blank-line layout, readable back with
/// `ScanSpec::blank(1, rows, cols)`.
pub fn write_frame(frame: &Frame, label: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# exported,{label},1 frames");
    out.push('\n');
    for i in 0..frame.rows() {
        let cells: Vec<String> = frame.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Writes the sequence in the blank-line layout.
pub fn export_sequence(seq: &Sequence, path: &Path) -> std::io::Result<()> {
    let (rows, cols) = seq.shape();
    std::fs::write(path, write_sequence(seq, &ScanSpec::blank(seq.frame_count(), rows, cols)))
}
