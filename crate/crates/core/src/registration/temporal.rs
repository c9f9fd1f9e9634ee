//! Temporal alignment by intensity correlation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RegistrationError;
use crate::model::{Frame, Sequence, Warning};
use crate::numeric::pairwise_sum;

/// Frames dropped from the head of a sequence of `frame_count` frames:
/// five, or the first 5 %, whichever is larger.
pub fn excluded_count(frame_count: usize) -> usize {
    5usize.max((frame_count * 5).div_ceil(100))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalAlignment {
    pub excluded: usize,
    pub j_max: usize,
    /// `(i, i + j_max)` for post-exclusion, 0-based frame indices.
    pub pairs: Vec<(usize, usize)>,
    pub avg_cor: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<Warning>,
}

impl TemporalAlignment {
    /// Pairs expressed as indices into the original (pre-exclusion) sequences.
    pub fn source_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().map(move |&(a, b)| (a + self.excluded, b + self.excluded))
    }
}

/// Mean-centred, unit-norm copy of the frame, or `None` for a constant frame.
fn standardise(f: &Frame) -> Option<Vec<f64>> {
    let n = f.values().len() as f64;
    let mean = pairwise_sum(f.values()) / n;
    let centred: Vec<f64> = f.values().iter().map(|v| v - mean).collect();
    let sq: Vec<f64> = centred.iter().map(|v| v * v).collect();
    let norm = pairwise_sum(&sq).sqrt();
    (norm > 0.0).then(|| centred.into_iter().map(|v| v / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&prod)
}

/// Sample Pearson correlation over all pixels. A constant frame correlates
/// 0 with anything.
pub fn pearson(a: &Frame, b: &Frame) -> Result<f64, RegistrationError> {
    if a.shape() != b.shape() {
        return Err(RegistrationError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(match (standardise(a), standardise(b)) {
        (Some(x), Some(y)) => dot(&x, &y).clamp(-1.0, 1.0),
        _ => {
            log::warn!("pearson: zero-variance frame, correlation taken as 0");
            0.0
        }
    })
}

/// Drops the unstable head of both sequences, then finds the shift of the
/// second sequence maximising the average frame-to-frame correlation.
pub fn temporal_align(seq1: &Sequence, seq2: &Sequence) -> Result<TemporalAlignment, RegistrationError> {
    if seq1.shape() != seq2.shape() {
        return Err(RegistrationError::ShapeMismatch(seq1.shape(), seq2.shape()));
    }
    let count = seq1.frame_count().min(seq2.frame_count());
    let excluded = excluded_count(count);
    if count <= excluded + 1 {
        return Err(RegistrationError::TooShort { frames: count, excluded });
    }
    let n = count - excluded;

    let std1: Vec<Option<Vec<f64>>> = seq1.frames()[excluded..count].par_iter().map(standardise).collect();
    let std2: Vec<Option<Vec<f64>>> = seq2.frames()[excluded..count].par_iter().map(standardise).collect();
    let mut warnings = Vec::new();
    if std1.iter().chain(&std2).any(Option::is_none) {
        warnings.push(Warning::new(
            "temporal",
            "constant frame(s) present; their correlations are taken as 0",
        ));
    }
    let cor = |i: usize, k: usize| match (&std1[i], &std2[k]) {
        (Some(x), Some(y)) => dot(x, y),
        _ => 0.0,
    };

    let avg_cor: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            let terms: Vec<f64> = (0..n - j).map(|i| cor(i, i + j)).collect();
            pairwise_sum(&terms) / (n - j) as f64
        })
        .collect();

    let mut j_max = 0;
    for (j, &v) in avg_cor.iter().enumerate() {
        if v > avg_cor[j_max] {
            j_max = j;
        }
    }
    if 2 * j_max > n {
        warnings.push(Warning::new(
            "temporal",
            format!("best shift {j_max} leaves only {} of {n} frames paired", n - j_max),
        ));
    }
    for w in &warnings {
        log::warn!("{}", w.message);
    }
    Ok(TemporalAlignment {
        excluded,
        j_max,
        pairs: (0..n - j_max).map(|i| (i, i + j_max)).collect(),
        avg_cor,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(n: usize, seed: u64) -> Vec<Frame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Frame::from_fn(8, 8, |_, _| rng.random::<f64>()).unwrap())
            .collect()
    }

    #[test]
    fn exclusion_rule() {
        assert_eq!(excluded_count(100), 5);
        assert_eq!(excluded_count(60), 5);
        assert_eq!(excluded_count(200), 10);
        assert_eq!(excluded_count(101), 6);
    }

    #[test]
    fn identical_sequences_align_at_zero() {
        let frames = random_frames(30, 1);
        let s = Sequence::new(frames, "", "s").unwrap();
        let a = temporal_align(&s, &s).unwrap();
        assert_eq!(a.j_max, 0);
        assert_eq!(a.excluded, 5);
        assert_eq!(a.pairs.len(), 25);
        assert!((a.avg_cor[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delayed_sequence_recovers_shift() {
        let base = random_frames(40, 2);
        let mut delayed = random_frames(3, 99);
        delayed.extend(base.iter().take(37).cloned());
        let s1 = Sequence::new(base, "", "a").unwrap();
        let s2 = Sequence::new(delayed, "", "b").unwrap();
        let a = temporal_align(&s1, &s2).unwrap();
        // Brute-force AvgCor for the oracle.
        let n = 40 - a.excluded;
        let f1 = &s1.frames()[a.excluded..];
        let f2 = &s2.frames()[a.excluded..];
        let brute: Vec<f64> = (0..n)
            .map(|j| (0..n - j).map(|i| pearson(&f1[i], &f2[i + j]).unwrap()).sum::<f64>() / (n - j) as f64)
            .collect();
        let best = (0..n).fold(0, |b, j| if brute[j] > brute[b] { j } else { b });
        assert_eq!(best, 3);
        assert_eq!(a.j_max, 3);
        assert_eq!(a.pairs[0], (0, 3));
        assert_eq!(a.pairs.len(), n - 3);
        for (x, y) in a.avg_cor.iter().zip(&brute) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn short_sequences_are_rejected() {
        let s = Sequence::new(random_frames(6, 3), "", "s").unwrap();
        assert!(matches!(temporal_align(&s, &s), Err(RegistrationError::TooShort { .. })));
    }

    #[test]
    fn pearson_basic_cases() {
        let f = Frame::from_rows(&[[1.0, 2.0], [3.0, 7.0]]).unwrap();
        assert!((pearson(&f, &f).unwrap() - 1.0).abs() < 1e-15);
        let mean = f.values().iter().sum::<f64>() / 4.0;
        let reflected = f.map(|v| 2.0 * mean - v).unwrap();
        assert!((pearson(&f, &reflected).unwrap() + 1.0).abs() < 1e-15);
        let flat = Frame::from_rows(&[[5.0, 5.0], [5.0, 5.0]]).unwrap();
        assert_eq!(pearson(&flat, &f).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn pearson_symmetric_and_affine_invariant(
            a in proptest::collection::vec(0.0f64..10.0, 9),
            b in proptest::collection::vec(0.0f64..10.0, 9),
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
        ) {
            let fa = Frame::new(3, 3, a).unwrap();
            let fb = Frame::new(3, 3, b).unwrap();
            let r = pearson(&fa, &fb).unwrap();
            prop_assert!((r - pearson(&fb, &fa).unwrap()).abs() < 1e-12);
            let scaled = fa.map(|v| scale * v + shift).unwrap();
            prop_assert!((r - pearson(&scaled, &fb).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}
