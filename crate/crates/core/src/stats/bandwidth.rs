//! Bandwidth selection by repeated K-fold cross-validation.
//!
//! A held-out pixel is predicted from the local fit at its location using
//! the observed pixels outside its fold. Full-data normal equations are
//! built once per candidate; each split subtracts the held-out fold's
//! contributions, which costs a fraction of a refit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::field::DiffField;
use super::smooth::{Bandwidths, Kernel, KernelSupport, Moments};
use super::StatsError;
use crate::numeric::pairwise_sum;

pub const DEFAULT_GRID: [f64; 8] = [0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvOptions {
    pub folds: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            iterations: 20,
            seed: 0,
        }
    }
}

/// `h1 = h2` over [`DEFAULT_GRID`].
pub fn default_grid() -> Vec<Bandwidths> {
    DEFAULT_GRID.iter().map(|&h| Bandwidths { h1: h, h2: h }).collect()
}

/// Every `(h1, h2)` combination of the given values.
pub fn product_grid(values: &[f64]) -> Vec<Bandwidths> {
    values
        .iter()
        .flat_map(|&h1| values.iter().map(move |&h2| Bandwidths { h1, h2 }))
        .collect()
}

/// Fold label for each masked pixel (in row-major mask order) for one
/// iteration: a seeded shuffle dealt round-robin into `folds` groups.
pub fn fold_assignment(n: usize, folds: usize, seed: u64, iteration: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((iteration as u64) << 32 | 0x5eed));
    order.shuffle(&mut rng);
    let mut fold_of = vec![0; n];
    for (pos, &t) in order.iter().enumerate() {
        fold_of[t] = pos % folds;
    }
    fold_of
}

/// Precomputed full-data fits for one candidate bandwidth.
struct CvPlan<'a> {
    d: &'a DiffField,
    kernel: Kernel,
    targets: Vec<usize>,
    target_of: Vec<usize>,
    full: Vec<Moments>,
}

impl<'a> CvPlan<'a> {
    fn new(d: &'a DiffField, h: Bandwidths, support: KernelSupport) -> Self {
        let shape = d.shape();
        let cols = d.cols;
        let kernel = Kernel::new(h, support, shape);
        let targets: Vec<usize> = (0..d.values.len()).filter(|&k| d.mask[k]).collect();
        let mut target_of = vec![usize::MAX; d.values.len()];
        for (t, &k) in targets.iter().enumerate() {
            target_of[k] = t;
        }
        let full = targets
            .par_iter()
            .map(|&k| {
                let (r, c) = (k / cols, k % cols);
                let (r0, r1, c0, c1) = kernel.window(r, c, shape);
                let mut mom = Moments::default();
                for i in r0..r1 {
                    for j in c0..c1 {
                        let idx = i * cols + j;
                        if d.observed[idx] {
                            let x = kernel.basis(i as isize - r as isize, j as isize - c as isize);
                            mom.add(kernel.weight(i.abs_diff(r), j.abs_diff(c)), &x, d.values[idx]);
                        }
                    }
                }
                mom
            })
            .collect();
        Self {
            d,
            kernel,
            targets,
            target_of,
            full,
        }
    }

    fn squared_errors(&self, fold_of: &[usize]) -> Vec<f64> {
        let (shape, cols) = (self.d.shape(), self.d.cols);
        (0..self.targets.len())
            .into_par_iter()
            .map(|t| {
                let k = self.targets[t];
                let fold = fold_of[t];
                let (r, c) = (k / cols, k % cols);
                let (r0, r1, c0, c1) = self.kernel.window(r, c, shape);
                let mut mom = self.full[t];
                for i in r0..r1 {
                    for j in c0..c1 {
                        let idx = i * cols + j;
                        let u = self.target_of[idx];
                        if u != usize::MAX && fold_of[u] == fold {
                            let x = self.kernel.basis(i as isize - r as isize, j as isize - c as isize);
                            mom.sub(self.kernel.weight(i.abs_diff(r), j.abs_diff(c)), &x, self.d.values[idx]);
                        }
                    }
                }
                let (pred, _) = mom.intercept();
                (self.d.values[k] - pred).powi(2)
            })
            .collect()
    }

    fn fold_mse(&self, fold_of: &[usize], folds: usize) -> Vec<f64> {
        let errors = self.squared_errors(fold_of);
        (0..folds)
            .map(|f| {
                let e: Vec<f64> = errors.iter().zip(fold_of).filter(|(_, &g)| g == f).map(|(e, _)| *e).collect();
                pairwise_sum(&e) / e.len() as f64
            })
            .collect()
    }
}

/// Mean squared prediction error of each fold for a given split.
pub fn cv_fold_errors(
    d: &DiffField,
    h: Bandwidths,
    support: KernelSupport,
    fold_of: &[usize],
    folds: usize,
) -> Vec<f64> {
    CvPlan::new(d, h, support).fold_mse(fold_of, folds)
}

fn effective_folds(d: &DiffField, opts: &CvOptions) -> Result<(usize, usize), StatsError> {
    let n = d.masked_count();
    if n < 2 || opts.folds < 2 || opts.iterations == 0 {
        return Err(StatsError::InvalidArgument(format!(
            "cross-validation needs >= 2 masked pixels, >= 2 folds and >= 1 iteration (n = {n})"
        )));
    }
    Ok((n, opts.folds.min(n)))
}

/// Cross-validation score of one candidate: fold MSEs averaged over folds
/// and iterations.
pub fn cv_score(d: &DiffField, h: Bandwidths, support: KernelSupport, opts: &CvOptions) -> Result<f64, StatsError> {
    let (n, folds) = effective_folds(d, opts)?;
    let plan = CvPlan::new(d, h, support);
    let per_iter: Vec<f64> = (0..opts.iterations)
        .map(|it| {
            let fold_of = fold_assignment(n, folds, opts.seed, it);
            pairwise_sum(&plan.fold_mse(&fold_of, folds)) / folds as f64
        })
        .collect();
    Ok(pairwise_sum(&per_iter) / opts.iterations as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub chosen: Bandwidths,
    /// `(candidate, score)` in grid order.
    pub scores: Vec<(Bandwidths, f64)>,
}

/// Grid candidate with the smallest score; ties go to the smaller `h1`, then
/// the smaller `h2`. A one-point grid is returned without scoring.
pub fn select_bandwidth(
    d: &DiffField,
    grid: &[Bandwidths],
    support: KernelSupport,
    opts: &CvOptions,
) -> Result<BandwidthSelection, StatsError> {
    match grid {
        [] => Err(StatsError::EmptyGrid),
        [only] => Ok(BandwidthSelection {
            chosen: *only,
            scores: vec![],
        }),
        _ => {
            let mut scores = Vec::with_capacity(grid.len());
            for &h in grid {
                let s = cv_score(d, h, support, opts)?;
                log::debug!("cv score h=({}, {}): {s}", h.h1, h.h2);
                scores.push((h, s));
            }
            let mut best = scores[0];
            for &(h, s) in &scores[1..] {
                let better = s < best.1 || (s == best.1 && (h.h1, h.h2) < (best.0.h1, best.0.h2));
                if better {
                    best = (h, s);
                }
            }
            Ok(BandwidthSelection { chosen: best.0, scores })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noisy_field(rows: usize, cols: usize, seed: u64) -> DiffField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..rows * cols)
            .map(|k| ((k / cols) as f64 * 0.3).sin() * 4.0 + rng.random::<f64>() - 0.5)
            .collect();
        DiffField::new(rows, cols, values, vec![true; rows * cols]).unwrap()
    }

    #[test]
    fn single_candidate_is_returned() {
        let d = noisy_field(6, 6, 1);
        let h = Bandwidths::isotropic(3.0).unwrap();
        let sel = select_bandwidth(&d, &[h], KernelSupport::Truncated, &CvOptions::default()).unwrap();
        assert_eq!(sel.chosen, h);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let d = noisy_field(4, 4, 1);
        assert!(matches!(
            select_bandwidth(&d, &[], KernelSupport::Truncated, &CvOptions::default()),
            Err(StatsError::EmptyGrid)
        ));
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let a = fold_assignment(95, 10, 7, 3);
        assert_eq!(a, fold_assignment(95, 10, 7, 3));
        assert_ne!(a, fold_assignment(95, 10, 7, 4));
        for f in 0..10 {
            let size = a.iter().filter(|&&g| g == f).count();
            assert!(size == 9 || size == 10);
        }
    }

    #[test]
    fn selection_is_deterministic() {
        let d = noisy_field(14, 14, 3);
        let grid = default_grid();
        let opts = CvOptions { iterations: 3, ..CvOptions::default() };
        let a = select_bandwidth(&d, &grid, KernelSupport::Truncated, &opts).unwrap();
        let b = select_bandwidth(&d, &grid, KernelSupport::Truncated, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ties_prefer_smaller_bandwidth() {
        // A constant field is predicted perfectly by every candidate.
        let d = DiffField::new(8, 8, vec![2.0; 64], vec![true; 64]).unwrap();
        let grid = [Bandwidths { h1: 2.0, h2: 1.0 }, Bandwidths { h1: 1.0, h2: 3.0 }, Bandwidths { h1: 1.0, h2: 2.0 }];
        let opts = CvOptions { iterations: 1, ..CvOptions::default() };
        let sel = select_bandwidth(&d, &grid, KernelSupport::Truncated, &opts).unwrap();
        assert!(sel.scores.iter().all(|(_, s)| *s < 1e-20));
        if sel.scores.iter().all(|(_, s)| *s == sel.scores[0].1) {
            assert_eq!(sel.chosen, Bandwidths { h1: 1.0, h2: 2.0 });
        }
    }

    #[test]
    fn product_grid_enumerates_pairs() {
        let g = product_grid(&[1.0, 2.0]);
        assert_eq!(g.len(), 4);
        assert!(g.contains(&Bandwidths { h1: 1.0, h2: 2.0 }));
    }
}
