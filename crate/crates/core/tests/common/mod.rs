//! Synthetic sequences shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use seqmap_core::ingest::{write_sequence, ScanSpec};
use seqmap_core::model::{Frame, Sequence};

/// Filled ellipse centred on `(crow, ccol)` with semi-axes `(a, b)` along
/// and across a direction `deg` degrees anticlockwise from the column axis.
pub fn ellipse(rows: usize, cols: usize, crow: f64, ccol: f64, a: f64, b: f64, deg: f64, inside: f64) -> Frame {
    let (s, c) = deg.to_radians().sin_cos();
    Frame::from_fn(rows, cols, |r, col| {
        let x = col as f64 - ccol;
        let y = crow - r as f64;
        let u = x * c + y * s;
        let v = -x * s + y * c;
        if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
            inside
        } else {
            0.0
        }
    })
    .unwrap()
}

pub fn add_noise(f: &Frame, sd: f64, rng: &mut ChaCha8Rng) -> Frame {
    let n = Normal::new(0.0, sd).unwrap();
    Frame::from_fn(f.rows(), f.cols(), |r, c| f.get(r, c) + n.sample(rng)).unwrap()
}

pub fn noise(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Frame {
    let n = Normal::new(0.0, 1.0).unwrap();
    Frame::from_fn(rows, cols, |_, _| n.sample(rng)).unwrap()
}

/// A bright tissue blob on a dim background whose length oscillates over
/// time, so neighbouring frames are distinguishable.
pub fn tongue_sequence(frames: usize, rows: usize, cols: usize, phase: usize, deg: f64, seed: u64) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = (0..frames)
        .map(|k| {
            let t = (k + phase) as f64;
            let a = cols as f64 * (0.28 + 0.08 * (t * 0.7).sin());
            let b = rows as f64 * (0.2 + 0.04 * (t * 0.45).cos());
            let base = ellipse(rows, cols, rows as f64 / 2.0, (cols as f64 - 1.0) / 2.0, a, b, deg, 90.0);
            let bg = Frame::from_fn(rows, cols, |r, c| base.get(r, c) + 10.0).unwrap();
            add_noise(&bg, 2.0, &mut rng)
        })
        .collect();
    Sequence::new(out, "synthetic", "tongue").unwrap()
}

pub fn write_blank(seq: &Sequence, path: &Path) -> ScanSpec {
    let (r, c) = seq.shape();
    let spec = ScanSpec::blank(seq.frame_count(), r, c);
    std::fs::write(path, write_sequence(seq, &spec)).unwrap();
    spec
}

/// Writes both sequences into `dir` and returns their paths and scan spec.
pub fn write_pair(dir: &Path, a: &Sequence, b: &Sequence) -> (PathBuf, PathBuf, ScanSpec) {
    let p1 = dir.join("seq1.csv");
    let p2 = dir.join("seq2.csv");
    let spec = write_blank(a, &p1);
    write_blank(b, &p2);
    (p1, p2, spec)
}
