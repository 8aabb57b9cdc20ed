//! Tuning-free denoisers used as baselines for the noisy federated average.
//!
//! James-Stein is the positive-part estimator shrinking toward zero;
//! soft-thresholding uses the universal threshold `ν√(2 ln d)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lapsmooth::SmoothingOperator;
use crate::vecops;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserKind {
    Identity,
    LaplacianSmoothing { sigma: f64 },
    JamesStein,
    SoftThreshold,
}

impl DenoiserKind {
    /// Denoises `v`, observed with i.i.d. noise of standard deviation `nu`.
    pub fn apply(&self, v: &[f64], nu: f64) -> Result<Vec<f64>> {
        match *self {
            DenoiserKind::Identity => Ok(v.to_vec()),
            DenoiserKind::LaplacianSmoothing { sigma } => {
                SmoothingOperator::new(sigma, v.len())?.apply(v)
            }
            DenoiserKind::JamesStein => js_estimate(v, nu),
            DenoiserKind::SoftThreshold => th_estimate(v, nu),
        }
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("noise level must be positive, got {nu}")))
    }
}

/// `v · max(0, 1 − (d−2)ν²/‖v‖²)`.
pub fn js_estimate(v_noisy: &[f64], nu: f64) -> Result<Vec<f64>> {
    check_nu(nu)?;
    let d = v_noisy.len();
    if d < 3 {
        return Err(Error::UnsupportedDimension { dim: d, min: 3 });
    }
    let energy = vecops::norm_sq(v_noisy);
    let factor = if energy > 0.0 {
        (1.0 - (d - 2) as f64 * nu * nu / energy).max(0.0)
    } else {
        0.0
    };
    Ok(v_noisy.iter().map(|x| x * factor).collect())
}

/// Coordinate-wise `sign(v_i)·max(0, |v_i| − ν√(2 ln d))`.
pub fn th_estimate(v_noisy: &[f64], nu: f64) -> Result<Vec<f64>> {
    check_nu(nu)?;
    let t = universal_threshold(v_noisy.len(), nu);
    Ok(v_noisy
        .iter()
        .map(|&x| x.signum() * (x.abs() - t).max(0.0))
        .collect())
}

pub fn universal_threshold(dim: usize, nu: f64) -> f64 {
    if dim <= 1 {
        return 0.0;
    }
    nu * (2.0 * (dim as f64).ln()).sqrt()
}
