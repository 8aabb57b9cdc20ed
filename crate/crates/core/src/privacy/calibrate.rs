//! Noise calibration for the whole training run.
//!
//! For a split `λ ∈ (0,1)` of the budget, the per-round mechanism is run at
//! order `α = ln(1/δ)/((1−λ)ε) + 1` with a per-round RDP of `λε/T`, which
//! after `T` compositions and conversion leaves `(1−λ)ε` for the `δ` term.
//! The noise that achieves this is
//!
//! `ν(λ) = (τL/ε)·√((c·T/λ)·(ln(1/δ)/(1−λ) + ε))`
//!
//! with `c = 14` for uniform subsampling (sensitivity `2L/K`) and `c = 2` for
//! Poisson subsampling (sensitivity `L/K`). A grid over `λ` selects the
//! smallest `ν` for which the subsampling lemma's side conditions hold.

use serde::{Deserialize, Serialize};

use super::rdp::{compose, rdp_poisson_closed, rdp_to_dp, rdp_uniform_closed, RdpCurve};
use crate::error::{Error, Result};

/// Default number of interior `λ` grid points.
pub const DEFAULT_LAMBDA_GRID: usize = 999;

/// Budget search interval for [`budget_from_noise`].
pub const EPSILON_SEARCH_RANGE: (f64, f64) = (1e-6, 1e4);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsampling {
    Uniform,
    Poisson,
}

impl Subsampling {
    /// Constant under the square root of the noise formula.
    fn noise_constant(self) -> f64 {
        match self {
            Subsampling::Uniform => 14.0,
            Subsampling::Poisson => 2.0,
        }
    }

    /// Per-round sensitivity of the summed update in units of the clip `L`.
    fn sensitivity_factor(self) -> f64 {
        match self {
            Subsampling::Uniform => 2.0,
            Subsampling::Poisson => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subsampling::Uniform => "uniform",
            Subsampling::Poisson => "poisson",
        }
    }
}

/// A subsampled Gaussian mechanism repeated for `rounds` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub kind: Subsampling,
    pub tau: f64,
    pub clip: f64,
    pub rounds: u64,
}

impl Mechanism {
    pub fn new(kind: Subsampling, tau: f64, clip: f64, rounds: u64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::invalid(format!("sampling ratio must lie in (0, 1], got {tau}")));
        }
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(Error::invalid(format!("clip must be positive, got {clip}")));
        }
        if rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        Ok(Self {
            kind,
            tau,
            clip,
            rounds,
        })
    }

    /// Noise in units of the per-round sensitivity (`K` cancels).
    pub fn noise_over_sensitivity(&self, nu: f64) -> f64 {
        nu / (self.kind.sensitivity_factor() * self.clip)
    }

    /// Closed-form per-round RDP at order `alpha`, `None` outside the
    /// lemma's side conditions.
    pub fn round_rdp(&self, nu: f64, alpha: f64) -> Result<Option<f64>> {
        let z = self.noise_over_sensitivity(nu);
        match self.kind {
            Subsampling::Uniform => rdp_uniform_closed(alpha, self.tau, z),
            Subsampling::Poisson => rdp_poisson_closed(alpha, self.tau, z),
        }
    }

    /// `ε` obtained by composing the per-round bound over all rounds and
    /// converting at `alpha`. `None` when the per-round bound is infeasible.
    pub fn epsilon_at(&self, nu: f64, alpha: f64, delta: f64) -> Result<Option<f64>> {
        let Some(rho) = self.round_rdp(nu, alpha)? else {
            return Ok(None);
        };
        let total = compose(&RdpCurve::new(vec![alpha], vec![rho])?, self.rounds)?;
        rdp_to_dp(alpha, total.rho[0], delta).map(Some)
    }

    fn candidate(&self, epsilon: f64, delta: f64, lambda: f64) -> (f64, f64) {
        let log_inv_delta = (1.0 / delta).ln();
        let alpha = log_inv_delta / ((1.0 - lambda) * epsilon) + 1.0;
        let inner = self.kind.noise_constant() * self.rounds as f64 / lambda
            * (log_inv_delta / (1.0 - lambda) + epsilon);
        let nu = self.tau * self.clip / epsilon * inner.sqrt();
        (nu, alpha)
    }
}

/// Result of a noise calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub nu: f64,
    pub lambda_star: f64,
    pub alpha: f64,
    /// `false` when no grid point satisfied the side conditions; `nu` then
    /// holds the smallest unconstrained candidate and is not a guarantee.
    pub feasible: bool,
}

/// `n` equispaced interior points of `(0, 1)`.
pub fn lambda_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

fn check_budget(epsilon: f64, delta: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Smallest noise over a `grid`-point `λ` sweep that yields `(ε, δ)`-DP.
pub fn calibrate_noise(
    mech: &Mechanism,
    epsilon: f64,
    delta: f64,
    grid: usize,
) -> Result<NoiseCalibration> {
    if grid < 2 {
        return Err(Error::invalid(format!("lambda grid needs at least 2 points, got {grid}")));
    }
    calibrate_noise_on(mech, epsilon, delta, &lambda_grid(grid))
}

/// [`calibrate_noise`] over an explicit set of `λ` values. Ties go to the
/// smallest `λ`.
pub fn calibrate_noise_on(
    mech: &Mechanism,
    epsilon: f64,
    delta: f64,
    lambdas: &[f64],
) -> Result<NoiseCalibration> {
    check_budget(epsilon, delta)?;
    if lambdas.is_empty() {
        return Err(Error::invalid("empty lambda grid"));
    }
    if let Some(&l) = lambdas.iter().find(|&&l| !(l > 0.0 && l < 1.0)) {
        return Err(Error::invalid(format!("lambda must lie in (0, 1), got {l}")));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut best: Option<NoiseCalibration> = None;
    let mut fallback: Option<NoiseCalibration> = None;
    for &lambda in &sorted {
        let (nu, alpha) = mech.candidate(epsilon, delta, lambda);
        let cal = NoiseCalibration {
            nu,
            lambda_star: lambda,
            alpha,
            feasible: true,
        };
        if fallback.is_none_or(|f| nu < f.nu) {
            fallback = Some(NoiseCalibration {
                feasible: false,
                ..cal
            });
        }
        if best.is_none_or(|b| nu < b.nu) && mech.round_rdp(nu, alpha)?.is_some() {
            best = Some(cal);
        }
    }
    Ok(best.or(fallback).expect("non-empty grid"))
}

/// Smallest `ε` (to relative `1e−6`) for which noise `nu` suffices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBudget {
    pub epsilon: f64,
    pub lambda_star: f64,
    pub alpha: f64,
}

/// Coarse log-spaced scan points used to bracket the smallest achievable ε.
const EPSILON_SCAN_POINTS: usize = 200;

/// Inverse of [`calibrate_noise`]: the smallest `ε` in the search range whose
/// calibration is feasible and needs at most `nu`. Using more noise than
/// calibrated is sound because the surplus is post-processing. `None` when
/// no `ε` in the range qualifies.
pub fn budget_from_noise(
    mech: &Mechanism,
    nu: f64,
    delta: f64,
    grid: usize,
) -> Result<Option<NoiseBudget>> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::invalid(format!("noise level must be positive, got {nu}")));
    }
    check_budget(1.0, delta)?;
    if grid < 2 {
        return Err(Error::invalid(format!("lambda grid needs at least 2 points, got {grid}")));
    }
    let lambdas = lambda_grid(grid);
    let witness = |ln_eps: f64| -> Result<Option<NoiseBudget>> {
        let epsilon = ln_eps.exp();
        let c = calibrate_noise_on(mech, epsilon, delta, &lambdas)?;
        Ok((c.feasible && c.nu <= nu).then_some(NoiseBudget {
            epsilon,
            lambda_star: c.lambda_star,
            alpha: c.alpha,
        }))
    };

    // Feasibility is not monotone at small ε, so bracket the first witness on
    // a log grid before bisecting.
    let (lo_bound, hi_bound) = (EPSILON_SEARCH_RANGE.0.ln(), EPSILON_SEARCH_RANGE.1.ln());
    let step = (hi_bound - lo_bound) / EPSILON_SCAN_POINTS as f64;
    let mut prev = lo_bound;
    let mut found = None;
    for i in 0..=EPSILON_SCAN_POINTS {
        let x = lo_bound + step * i as f64;
        if let Some(b) = witness(x)? {
            found = Some((x, b));
            break;
        }
        prev = x;
    }
    let Some((mut hi, mut best)) = found else {
        return Ok(None);
    };
    let mut lo = prev;
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        match witness(mid)? {
            Some(b) => {
                best = b;
                hi = mid;
            }
            None => lo = mid,
        }
    }
    Ok(Some(best))
}

/// Largest round count satisfying `T ≤ λε²ν₁²/(14τ²(ln(1/δ)/(1−λ) + ε))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundsBound {
    /// `floor(bound)`, or 0 when infeasible.
    pub rounds: u64,
    /// Right-hand side before flooring.
    pub bound: f64,
    pub alpha: f64,
    pub feasible: bool,
}

/// Communication budget for uniform subsampling at fixed noise multiplier
/// `nu1 = ν/L`. Requires `ν₁ ≥ 8/3` and
/// `α − 1 ≤ (ν₁²/6)·ln(1/(τα(1+ν₁²/4)))`.
pub fn max_rounds(nu1: f64, tau: f64, epsilon: f64, delta: f64, lambda: f64) -> Result<RoundsBound> {
    check_budget(epsilon, delta)?;
    if !(nu1 > 0.0 && nu1.is_finite()) {
        return Err(Error::invalid(format!("noise multiplier must be positive, got {nu1}")));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("sampling ratio must lie in (0, 1], got {tau}")));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::invalid(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let alpha = log_inv_delta / ((1.0 - lambda) * epsilon) + 1.0;
    let bound = lambda * epsilon * epsilon * nu1 * nu1
        / (14.0 * tau * tau * (log_inv_delta / (1.0 - lambda) + epsilon));
    let nu1_sq = nu1 * nu1;
    let order_ok =
        alpha - 1.0 <= nu1_sq / 6.0 * (1.0 / (tau * alpha * (1.0 + nu1_sq / 4.0))).ln();
    let feasible = nu1 >= 8.0 / 3.0 && order_ok;
    Ok(RoundsBound {
        rounds: if feasible { bound.floor() as u64 } else { 0 },
        bound,
        alpha,
        feasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mnist_mech(clip: f64) -> Mechanism {
        Mechanism::new(Subsampling::Uniform, 0.05, clip, 30).unwrap()
    }

    fn mnist_delta() -> f64 {
        1000f64.powf(-1.1)
    }

    #[test]
    fn candidate_matches_closed_form_identity() {
        // At the candidate noise, per-round RDP is exactly λε/T.
        let m = mnist_mech(0.3);
        let (eps, delta, lambda) = (7.0, mnist_delta(), 0.4);
        let (nu, alpha) = m.candidate(eps, delta, lambda);
        let z = m.noise_over_sensitivity(nu);
        let rho = 3.5 * m.tau * m.tau * alpha / (z * z);
        assert_relative_eq!(rho, lambda * eps / 30.0, max_relative = 1e-12);
    }

    #[test]
    fn doubling_clip_doubles_noise() {
        let a = calibrate_noise(&mnist_mech(0.3), 7.0, mnist_delta(), 999).unwrap();
        let b = calibrate_noise(&mnist_mech(0.6), 7.0, mnist_delta(), 999).unwrap();
        assert!(a.feasible && b.feasible);
        assert_relative_eq!(b.nu, 2.0 * a.nu, max_relative = 1e-12);
        assert_eq!(a.lambda_star, b.lambda_star);
    }

    #[test]
    fn mnist_golden_values() {
        // frozen from an independent grid-search evaluation
        let c = calibrate_noise(&mnist_mech(0.3), 7.0, mnist_delta(), 999).unwrap();
        assert!(c.feasible);
        assert_relative_eq!(c.nu, 0.6650340475703718, max_relative = 1e-12);
        assert_relative_eq!(c.lambda_star, 0.066, max_relative = 1e-12);
        assert_relative_eq!(c.alpha, 2.1622102794249543, max_relative = 1e-12);

        let c = calibrate_noise(&mnist_mech(0.3), 6.0, mnist_delta(), 999).unwrap();
        assert_relative_eq!(c.nu, 0.811517418626118, max_relative = 1e-12);
        assert_relative_eq!(c.lambda_star, 0.056, max_relative = 1e-12);

        // the closed-form side conditions exclude every λ below ε ≈ 5.5
        assert!(!calibrate_noise(&mnist_mech(0.3), 5.0, mnist_delta(), 999).unwrap().feasible);
    }

    #[test]
    fn poisson_needs_less_noise() {
        let delta = mnist_delta();
        for eps in [6.0, 9.0, 12.0] {
            let u = calibrate_noise(&mnist_mech(0.3), eps, delta, 999).unwrap();
            let p = calibrate_noise(
                &Mechanism::new(Subsampling::Poisson, 0.05, 0.3, 30).unwrap(),
                eps,
                delta,
                999,
            )
            .unwrap();
            assert!(u.feasible && p.feasible);
            assert!(p.nu < u.nu);
        }
    }

    #[test]
    fn infeasible_calibration_reports_fallback() {
        // Tiny noise regime: ν/2L far below √(2/3).
        let m = Mechanism::new(Subsampling::Uniform, 0.001, 1.0, 1).unwrap();
        let c = calibrate_noise(&m, 30.0, 1e-5, 99).unwrap();
        assert!(!c.feasible);
        assert!(c.nu > 0.0);
    }

    #[test]
    fn budget_round_trip_and_monotonicity() {
        let m = mnist_mech(0.3);
        let delta = mnist_delta();
        for eps in [6.0, 7.0, 8.0, 9.0] {
            let c = calibrate_noise(&m, eps, delta, 999).unwrap();
            assert!(c.feasible);
            let b = budget_from_noise(&m, c.nu, delta, 999).unwrap().unwrap();
            assert_relative_eq!(b.epsilon, eps, max_relative = 1e-4);
        }
        // Past ε ≈ 10.5 the side conditions force larger noise, so a smaller
        // budget already covers the calibrated ν.
        for eps in [12.0, 30.0] {
            let c = calibrate_noise(&m, eps, delta, 999).unwrap();
            let b = budget_from_noise(&m, c.nu, delta, 999).unwrap().unwrap();
            assert!(b.epsilon < eps);
            let again = calibrate_noise(&m, b.epsilon, delta, 999).unwrap();
            assert!(again.feasible && again.nu <= c.nu);
        }
        let lo = budget_from_noise(&m, 1.0, delta, 999).unwrap().unwrap();
        let hi = budget_from_noise(&m, 2.0, delta, 999).unwrap().unwrap();
        assert!(hi.epsilon < lo.epsilon);
        // ν/2L < √(2/3) can never satisfy the side conditions.
        assert!(budget_from_noise(&m, 0.4, delta, 999).unwrap().is_none());
    }

    #[test]
    fn max_rounds_examples() {
        let r = max_rounds(2.0, 0.05, 2.0, 1e-5, 0.5).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.rounds, 0);

        let a = max_rounds(4.0, 0.01, 2.0, 1e-5, 0.5).unwrap();
        let b = max_rounds(16.0, 0.01, 2.0, 1e-5, 0.5).unwrap();
        assert_relative_eq!(b.bound, 16.0 * a.bound, max_relative = 1e-12);

        // α = ln(1e5)/(0.5·2) + 1 = 12.51; τα(1+ν₁²/4) = 3.13 > 1 so the
        // order condition fails even though the raw bound is positive.
        let r = max_rounds(4.0, 0.05, 2.0, 1e-5, 0.5).unwrap();
        let expected = 0.5 * 4.0 * 16.0 / (14.0 * 0.0025 * (1e5f64.ln() / 0.5 + 2.0));
        assert_relative_eq!(r.bound, expected, max_relative = 1e-14);
        assert_relative_eq!(r.bound, 36.53365, max_relative = 1e-6);
        assert!(!r.feasible);
        assert_eq!(r.rounds, 0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(Mechanism::new(Subsampling::Uniform, 0.0, 1.0, 1).is_err());
        assert!(Mechanism::new(Subsampling::Uniform, 0.5, 0.0, 1).is_err());
        assert!(Mechanism::new(Subsampling::Uniform, 0.5, 1.0, 0).is_err());
        let m = mnist_mech(0.3);
        assert!(calibrate_noise(&m, 1.0, 1e-5, 1).is_err());
        assert!(calibrate_noise(&m, -1.0, 1e-5, 10).is_err());
        assert!(calibrate_noise(&m, 1.0, 1.0, 10).is_err());
        assert!(calibrate_noise_on(&m, 1.0, 1e-5, &[1.0]).is_err());
        assert!(max_rounds(4.0, 0.05, 2.0, 1e-5, 1.0).is_err());
    }
}
