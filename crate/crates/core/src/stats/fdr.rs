//! Benjamini-Hochberg step-up procedure.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub rejected: Vec<bool>,
    pub adjusted: Vec<f64>,
    /// Largest rejected p-value, if any.
    pub cutoff: Option<f64>,
}

/// Rejects every hypothesis with `p <= p_(k*)`, where `k*` is the largest
/// rank with `p_(k) <= k * alpha / m`. Adjusted values are
/// `min_{j >= rank} m * p_(j) / j`, capped at 1.
pub fn bh_fdr(p: &[f64], alpha: f64) -> FdrResult {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));

    let mut k_star = None;
    for (rank, &i) in order.iter().enumerate() {
        if p[i] <= (rank + 1) as f64 * alpha / m as f64 {
            k_star = Some(rank);
        }
    }
    let cutoff = k_star.map(|k| p[order[k]]);
    let rejected = p.iter().map(|&v| cutoff.is_some_and(|c| v <= c)).collect();

    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(m as f64 * p[i] / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    FdrResult {
        rejected,
        adjusted,
        cutoff,
    }
}
