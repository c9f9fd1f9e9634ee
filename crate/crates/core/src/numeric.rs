//! Small numeric helpers shared across modules.

/// Pairwise (tree) summation. The association order depends only on the
/// length of the input, so the result is reproducible regardless of how the
/// terms were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if values.len() <= LEAF {
        return values.iter().fold(0.0, |acc, v| acc + v);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Dense Cholesky solve of a small symmetric positive-definite system,
/// in place. `a` is row-major `n x n` (only the lower triangle is read).
/// Returns `None` when a pivot falls below `rel_tol` times the largest
/// diagonal entry.
pub fn cholesky_solve<const N: usize>(a: &[[f64; N]; N], b: &[f64; N], rel_tol: f64) -> Option<[f64; N]> {
    let max_diag = (0..N).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    if !(max_diag > 0.0) {
        return None;
    }
    let mut l = [[0.0; N]; N];
    for i in 0..N {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > rel_tol * max_diag) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; N];
    for i in 0..N {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; N];
    for i in (0..N).rev() {
        let mut s = y[i];
        for k in i + 1..N {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}
