//! Rényi-DP bounds for the (subsampled) Gaussian mechanism.
//!
//! Noise levels are expressed in sensitivity units (`ν/Δ`). The closed forms
//! are only sound inside their side conditions, so they return `None` outside
//! them instead of a number.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 1.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("Renyi order must be finite and > 1, got {alpha}")))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("sampling ratio must lie in (0, 1], got {tau}")))
    }
}

fn check_noise(nu: f64) -> Result<()> {
    if nu > 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("noise level must be positive, got {nu}")))
    }
}

/// Unsubsampled Gaussian mechanism: `α / (2(ν/Δ)²)`.
pub fn rdp_gaussian(alpha: f64, nu_over_sens: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_noise(nu_over_sens)?;
    Ok(alpha / (2.0 * nu_over_sens * nu_over_sens))
}

/// The order condition shared by both subsampled closed forms:
/// `α − 1 ≤ (2/3)ν² ln(1/(ατ(1+ν²)))`.
pub fn order_condition_holds(alpha: f64, tau: f64, nu_sq: f64) -> bool {
    let rhs = (2.0 / 3.0) * nu_sq * (1.0 / (alpha * tau * (1.0 + nu_sq))).ln();
    alpha - 1.0 <= rhs
}

fn closed_form(
    alpha: f64,
    tau: f64,
    nu_over_sens: f64,
    constant: f64,
    min_nu_sq: f64,
) -> Result<Option<f64>> {
    check_alpha(alpha)?;
    check_tau(tau)?;
    check_noise(nu_over_sens)?;
    let nu_sq = nu_over_sens * nu_over_sens;
    if nu_sq >= min_nu_sq && order_condition_holds(alpha, tau, nu_sq) {
        Ok(Some(constant * tau * tau * alpha / nu_sq))
    } else {
        Ok(None)
    }
}

/// Uniform subsampling without replacement: `3.5τ²α/ν²`, valid when
/// `ν² ≥ 2/3` and the order condition holds.
pub fn rdp_uniform_closed(alpha: f64, tau: f64, nu_over_sens: f64) -> Result<Option<f64>> {
    closed_form(alpha, tau, nu_over_sens, 3.5, 2.0 / 3.0)
}

/// Poisson subsampling: `2τ²α/ν²`, valid when `ν² ≥ 5/9` and the order
/// condition holds.
pub fn rdp_poisson_closed(alpha: f64, tau: f64, nu_over_sens: f64) -> Result<Option<f64>> {
    closed_form(alpha, tau, nu_over_sens, 2.0, 5.0 / 9.0)
}

/// Terms more than this many nats below the largest are dropped (≈1e−300).
const LOG_DROP: f64 = 690.0;

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = terms
        .iter()
        .filter(|&&t| t > max - LOG_DROP)
        .map(|&t| (t - max).exp())
        .sum();
    max + s.ln()
}

/// `ln C(n, j)` for `j = 0..=n`.
fn log_binomials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for j in 1..=n {
        acc += ((n - j + 1) as f64).ln() - (j as f64).ln();
        out.push(acc);
    }
    out
}

fn check_integer_order(alpha: u64) -> Result<()> {
    if alpha >= 2 {
        Ok(())
    } else {
        Err(Error::invalid(format!("integer Renyi order must be >= 2, got {alpha}")))
    }
}

/// Upper bound for the Gaussian mechanism under uniform subsampling without
/// replacement at integer order `α`:
///
/// `(1/(α−1)) ln(1 + τ²C(α,2)·min{4(e^{ρ(2)}−1), 2e^{ρ(2)}} + Σ_{j=3}^{α} 2τ^j C(α,j) e^{(j−1)ρ(j)})`
/// with `ρ(j) = j/(2ν²)`. Evaluated in log space; returns `+∞` when the bound
/// is vacuous.
pub fn rdp_uniform_numeric(alpha: u64, tau: f64, nu_over_sens: f64) -> Result<f64> {
    check_integer_order(alpha)?;
    check_tau(tau)?;
    check_noise(nu_over_sens)?;
    let inv_nu_sq = 1.0 / (nu_over_sens * nu_over_sens);
    let ln_tau = tau.ln();
    let lnc = log_binomials(alpha);

    let second = (4.0 * inv_nu_sq.exp_m1()).min(2.0 * inv_nu_sq.exp());
    let mut terms = Vec::with_capacity(alpha as usize);
    terms.push(0.0);
    terms.push(2.0 * ln_tau + lnc[2] + second.ln());
    for j in 3..=alpha {
        let jf = j as f64;
        terms.push(std::f64::consts::LN_2 + jf * ln_tau + lnc[j as usize] + (jf - 1.0) * jf * 0.5 * inv_nu_sq);
    }
    Ok(finish(log_sum_exp(&terms), alpha))
}

/// Upper bound for the Gaussian mechanism under Poisson subsampling at
/// integer order `α`:
///
/// `(1/(α−1)) ln((ατ−τ+1)(1−τ)^{α−1} + Σ_{j=2}^{α} C(α,j)(1−τ)^{α−j} τ^j e^{(j−1)ρ(j)})`.
pub fn rdp_poisson_numeric(alpha: u64, tau: f64, nu_over_sens: f64) -> Result<f64> {
    check_integer_order(alpha)?;
    check_tau(tau)?;
    check_noise(nu_over_sens)?;
    let inv_nu_sq = 1.0 / (nu_over_sens * nu_over_sens);
    let ln_tau = tau.ln();
    let ln_keep = (-tau).ln_1p();
    // (1−τ)^k in log space, with 0^0 = 1
    let ln_keep_pow = |k: u64| if k == 0 { 0.0 } else { k as f64 * ln_keep };
    let lnc = log_binomials(alpha);
    let af = alpha as f64;

    let mut terms = Vec::with_capacity(alpha as usize);
    terms.push((af * tau - tau + 1.0).ln() + ln_keep_pow(alpha - 1));
    for j in 2..=alpha {
        let jf = j as f64;
        terms.push(lnc[j as usize] + ln_keep_pow(alpha - j) + jf * ln_tau + (jf - 1.0) * jf * 0.5 * inv_nu_sq);
    }
    Ok(finish(log_sum_exp(&terms), alpha))
}

fn finish(log_moment: f64, alpha: u64) -> f64 {
    let r = log_moment / (alpha as f64 - 1.0);
    if r.is_nan() {
        f64::INFINITY
    } else {
        r.max(0.0)
    }
}

/// RDP parameters at a set of orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub rho: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if orders.len() != rho.len() {
            return Err(Error::DimensionMismatch {
                expected: orders.len(),
                got: rho.len(),
            });
        }
        if let Some(&a) = orders.iter().find(|&&a| !(a > 1.0)) {
            return Err(Error::invalid(format!("Renyi order must be > 1, got {a}")));
        }
        if let Some(&r) = rho.iter().find(|&&r| !(r >= 0.0)) {
            return Err(Error::invalid(format!("RDP parameter must be >= 0, got {r}")));
        }
        Ok(Self { orders, rho })
    }
}

/// `k`-fold homogeneous composition: each `ρ(α)` is multiplied by `k`.
pub fn compose(curve: &RdpCurve, k: u64) -> Result<RdpCurve> {
    if k == 0 {
        return Err(Error::invalid("composition count must be at least 1"));
    }
    Ok(RdpCurve {
        orders: curve.orders.clone(),
        rho: curve.rho.iter().map(|r| r * k as f64).collect(),
    })
}

/// `(α, ρ)`-RDP implies `(ρ + ln(1/δ)/(α−1), δ)`-DP.
pub fn rdp_to_dp(alpha: f64, rho: f64, delta: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(rho >= 0.0) {
        return Err(Error::invalid(format!("RDP parameter must be >= 0, got {rho}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(rho + (1.0 / delta).ln() / (alpha - 1.0))
}
