//! T-type statistics and their p-values.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::df::DfEstimate;
use super::smooth::SmoothResult;
use super::StatsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    #[default]
    TwoSided,
    GreaterThanZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TMap {
    pub values: Vec<f64>,
    /// Masked pixels whose hat row has zero norm; their T is 0.
    pub zero_norm_pixels: Vec<usize>,
}

/// `T(s) = m_hat(s) / (sigma_hat * ||p(s)||)` on masked pixels, 0 elsewhere.
/// A zero residual scale yields an all-zero map.
pub fn t_map(sr: &SmoothResult, df: &DfEstimate) -> TMap {
    let mut values = vec![0.0; sr.m_hat.len()];
    let mut zero_norm_pixels = Vec::new();
    if !(df.sigma_hat > 0.0) {
        log::warn!("residual scale is zero; T map set to 0");
        return TMap { values, zero_norm_pixels };
    }
    for k in 0..values.len() {
        if !sr.mask[k] {
            continue;
        }
        let norm = sr.hat_norm[k];
        if norm > 0.0 {
            values[k] = sr.m_hat[k] / (df.sigma_hat * norm);
        } else {
            zero_norm_pixels.push(k);
        }
    }
    TMap { values, zero_norm_pixels }
}

/// Student-t p-value of every entry.
pub fn p_map(t: &[f64], nu: f64, sidedness: Sidedness) -> Result<Vec<f64>, StatsError> {
    let dist = StudentsT::new(0.0, 1.0, nu).map_err(|e| StatsError::InvalidArgument(format!("df {nu}: {e}")))?;
    Ok(t.iter()
        .map(|&v| match sidedness {
            Sidedness::GreaterThanZero => dist.sf(v),
            Sidedness::TwoSided => (2.0 * dist.sf(v.abs())).min(1.0),
        })
        .collect())
}
