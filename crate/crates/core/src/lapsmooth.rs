//! Laplacian smoothing on the cycle graph.
//!
//! `A_σ = I + σL` where `L` is the Laplacian of the `d`-cycle, so `A_σ` is
//! circulant with first row `(1+2σ, −σ, 0, …, 0, −σ)`. Circulant systems are
//! diagonalised by the DFT, which makes `A_σ⁻¹v` an `O(d log d)` operation:
//! transform, divide by the Fourier symbol, transform back.
//!
//! Degenerate cycles: for `d = 1` the operator is the identity, for `d = 2`
//! the two wrap-around neighbours coincide and the first row is `(1+2σ, −2σ)`.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::substream;
use crate::vecops;

/// How a flat parameter vector is laid out along the cycle before smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlattenOrder {
    /// Smooth the vector in its storage order.
    #[default]
    Identity,
    /// Treat the vector as a row-major `rows × cols` matrix and smooth it in
    /// column-major order.
    Transpose { rows: usize, cols: usize },
}

/// The operator `A_σ⁻¹` for a fixed dimension and smoothing factor.
#[derive(Clone)]
pub struct SmoothingOperator {
    sigma: f64,
    dim: usize,
    fourier_symbol: Vec<Complex64>,
    eigenvalues: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SmoothingOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothingOperator")
            .field("sigma", &self.sigma)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

/// The convolution stencil `d` with `A_σ u = u − σ (d ∗ u)`.
fn laplacian_stencil(dim: usize) -> Vec<f64> {
    match dim {
        1 => vec![0.0],
        2 => vec![-2.0, 2.0],
        _ => {
            let mut d = vec![0.0; dim];
            d[0] = -2.0;
            d[1] = 1.0;
            d[dim - 1] = 1.0;
            d
        }
    }
}

/// Eigenvalue `2(1 − cos(2πk/d))` of the cycle Laplacian at frequency `k`.
pub fn laplacian_eigenvalue(k: usize, dim: usize) -> f64 {
    2.0 * (1.0 - (2.0 * PI * k as f64 / dim as f64).cos())
}

impl SmoothingOperator {
    pub fn new(sigma: f64, dim: usize) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        let mut planner = FftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(dim);
        let inverse = planner.plan_fft_inverse(dim);

        let mut symbol: Vec<Complex64> = laplacian_stencil(dim)
            .into_iter()
            .map(|x| Complex64::new(x, 0.0))
            .collect();
        forward.process(&mut symbol);
        for s in symbol.iter_mut() {
            *s = Complex64::new(1.0, 0.0) - sigma * *s;
        }

        let eigenvalues = (1..=dim)
            .map(|i| 1.0 / (1.0 + sigma * laplacian_eigenvalue(i, dim)))
            .collect();

        Ok(Self {
            sigma,
            dim,
            fourier_symbol: symbol,
            eigenvalues,
            forward,
            inverse,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `1 − σ·FFT(d)`, indexed by FFT bin `0..d`.
    pub fn fourier_symbol(&self) -> &[Complex64] {
        &self.fourier_symbol
    }

    /// Eigenvalues `Λ_i = 1/(1+2σ(1−cos(2πi/d)))` of `A_σ⁻¹` for `i = 1..=d`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Solves `A_σ u = v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = v.to_vec();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    pub fn apply_in_place(&self, v: &mut [f64]) -> Result<()> {
        check_len(self.dim, v.len())?;
        if self.sigma == 0.0 {
            return Ok(());
        }
        let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward.process(&mut buf);
        for (b, s) in buf.iter_mut().zip(&self.fourier_symbol) {
            *b /= s.re;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.dim as f64;

        #[cfg(debug_assertions)]
        {
            let residue = buf.iter().map(|c| c.im.abs()).fold(0.0, f64::max) * scale;
            let tol = 1e-9 * vecops::norm(v) + 1e-300;
            debug_assert!(residue <= tol, "imaginary residue {residue} exceeds {tol}");
        }

        for (x, b) in v.iter_mut().zip(&buf) {
            *x = b.re * scale;
        }
        Ok(())
    }

    /// Smooths `v` along the cycle defined by `order`.
    pub fn apply_ordered(&self, v: &mut [f64], order: FlattenOrder) -> Result<()> {
        match order {
            FlattenOrder::Identity => self.apply_in_place(v),
            FlattenOrder::Transpose { rows, cols } => {
                check_len(rows * cols, v.len())?;
                let mut permuted = vec![0.0; v.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        permuted[c * rows + r] = v[r * cols + c];
                    }
                }
                self.apply_in_place(&mut permuted)?;
                for r in 0..rows {
                    for c in 0..cols {
                        v[r * cols + c] = permuted[c * rows + r];
                    }
                }
                Ok(())
            }
        }
    }

    /// `⟨v, A_σ⁻¹ v⟩`, the squared norm `‖v‖²_{A_σ⁻¹}`.
    pub fn inverse_quadratic_form(&self, v: &[f64]) -> Result<f64> {
        let u = self.apply(v)?;
        Ok(vecops::dot(v, &u))
    }

    /// `(d_σ, d̃_σ) = (Σ Λ_i, Σ Λ_i²)`.
    pub fn effective_dims(&self) -> (f64, f64) {
        self.eigenvalues
            .iter()
            .fold((0.0, 0.0), |(s1, s2), &l| (s1 + l, s2 + l * l))
    }

    /// Smallest eigenvalue of `A_σ⁻¹`.
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Free-function form of [`SmoothingOperator::apply`].
pub fn smooth_apply(op: &SmoothingOperator, v: &[f64]) -> Result<Vec<f64>> {
    op.apply(v)
}

pub fn effective_dims(op: &SmoothingOperator) -> (f64, f64) {
    op.effective_dims()
}

/// Orthonormal real Fourier basis of `R^d` paired with the cycle-Laplacian
/// eigenvalue of each vector: the constant vector, then `cos`/`sin` pairs,
/// then the alternating vector when `d` is even.
pub fn real_fourier_basis(dim: usize) -> Vec<(f64, Vec<f64>)> {
    let d = dim as f64;
    let mut basis = Vec::with_capacity(dim);
    basis.push((0.0, vec![1.0 / d.sqrt(); dim]));
    let amp = (2.0 / d).sqrt();
    for k in 1..=(dim - 1) / 2 {
        let lambda = laplacian_eigenvalue(k, dim);
        let angle = |j: usize| 2.0 * PI * (k * j % dim) as f64 / d;
        basis.push((lambda, (0..dim).map(|j| amp * angle(j).cos()).collect()));
        basis.push((lambda, (0..dim).map(|j| amp * angle(j).sin()).collect()));
    }
    if dim.is_multiple_of(2) && dim >= 2 {
        let alt = (0..dim)
            .map(|j| if j % 2 == 0 { 1.0 } else { -1.0 } / d.sqrt())
            .collect();
        basis.push((4.0, alt));
    }
    basis
}

/// Bias/variance split of the mean squared error of `A_σ⁻¹(v + n)` as an
/// estimate of `v`, `n ~ N(0, ν²I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskReport {
    pub bias: f64,
    pub variance: f64,
    pub total: f64,
}

pub fn ls_risk(op: &SmoothingOperator, v_true: &[f64], nu: f64) -> Result<RiskReport> {
    check_len(op.dim(), v_true.len())?;
    if !(nu > 0.0) {
        return Err(Error::invalid(format!("noise level must be positive, got {nu}")));
    }
    let sigma = op.sigma();
    let (mut bias, mut variance) = (0.0, 0.0);
    for (lambda, e) in real_fourier_basis(op.dim()) {
        let shrink = 1.0 + sigma * lambda;
        let proj = vecops::dot(v_true, &e);
        bias += (sigma * lambda / shrink).powi(2) * proj * proj;
        variance += nu * nu / (shrink * shrink);
    }
    Ok(RiskReport {
        bias,
        variance,
        total: bias + variance,
    })
}

/// Empirical mean of `‖A_σ⁻¹(v + n) − v‖²` over `trials` Gaussian draws.
pub fn risk_monte_carlo(
    op: &SmoothingOperator,
    v_true: &[f64],
    nu: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    check_len(op.dim(), v_true.len())?;
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let mut rng = substream(seed, 0, 0);
    let mut noisy = vec![0.0; op.dim()];
    let mut acc = 0.0;
    for _ in 0..trials {
        for (x, &v) in noisy.iter_mut().zip(v_true) {
            let z: f64 = rng.sample(StandardNormal);
            *x = v + nu * z;
        }
        op.apply_in_place(&mut noisy)?;
        acc += noisy
            .iter()
            .zip(v_true)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(acc / trials as f64)
}

/// Positive-frequency DFT magnitudes of a vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumDump {
    pub frequencies: Vec<usize>,
    pub magnitudes: Vec<f64>,
}

impl SpectrumDump {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "freq,magnitude")?;
        for (f, m) in self.frequencies.iter().zip(&self.magnitudes) {
            writeln!(w, "{f},{m:e}")?;
        }
        Ok(())
    }

    /// Least-squares slope of `log10(magnitude)` against `log10(freq)`,
    /// ignoring zero magnitudes. `None` with fewer than two usable points.
    pub fn loglog_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .frequencies
            .iter()
            .zip(&self.magnitudes)
            .filter(|(_, &m)| m > 0.0)
            .map(|(&f, &m)| ((f as f64).log10(), m.log10()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    }
}

pub fn spectrum(v: &[f64]) -> Result<SpectrumDump> {
    if v.len() < 2 {
        return Err(Error::UnsupportedDimension { dim: v.len(), min: 2 });
    }
    let d = v.len();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(d);
    let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft.process(&mut buf);
    let frequencies: Vec<usize> = (1..=d / 2).collect();
    let magnitudes = frequencies.iter().map(|&k| buf[k].norm()).collect();
    Ok(SpectrumDump {
        frequencies,
        magnitudes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_when_sigma_zero() {
        let op = SmoothingOperator::new(0.0, 7).unwrap();
        let v = [1.0, -2.0, 3.5, 0.0, 4.0, -1.0, 2.0];
        assert_eq!(op.apply(&v).unwrap(), v.to_vec());
    }

    #[test]
    fn four_point_impulse_response() {
        // Dense solve of the circulant system with first row (3, -1, 0, -1).
        let op = SmoothingOperator::new(1.0, 4).unwrap();
        let u = op.apply(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = [7.0 / 15.0, 1.0 / 5.0, 2.0 / 15.0, 1.0 / 5.0];
        for (a, b) in u.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn constant_vector_is_fixed() {
        for sigma in [0.5, 1.0, 3.0] {
            let op = SmoothingOperator::new(sigma, 13).unwrap();
            for x in op.apply(&[2.5; 13]).unwrap() {
                assert_abs_diff_eq!(x, 2.5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_cycles() {
        let op = SmoothingOperator::new(2.0, 1).unwrap();
        assert_abs_diff_eq!(op.apply(&[3.0]).unwrap()[0], 3.0, epsilon = 1e-15);
        // d = 2: first row (1+2σ, -2σ) = (5, -4); inverse of [[5,-4],[-4,5]] is [[5,4],[4,5]]/9.
        let op = SmoothingOperator::new(2.0, 2).unwrap();
        let u = op.apply(&[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(u[0], 5.0 / 9.0, epsilon = 1e-14);
        assert_abs_diff_eq!(u[1], 4.0 / 9.0, epsilon = 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let op = SmoothingOperator::new(1.0, 4).unwrap();
        assert!(matches!(
            op.apply(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 4, got: 2 })
        ));
        assert!(SmoothingOperator::new(-1.0, 4).is_err());
    }

    #[test]
    fn effective_dimensions() {
        let (d1, d2) = SmoothingOperator::new(0.0, 100).unwrap().effective_dims();
        assert_abs_diff_eq!(d1, 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d2, 100.0, epsilon = 1e-12);

        let (d1, d2) = SmoothingOperator::new(1.0, 4).unwrap().effective_dims();
        assert_abs_diff_eq!(d1, 28.0 / 15.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d2, 284.0 / 225.0, epsilon = 1e-14);
        assert!(d2 < d1 && d1 < 4.0);
    }

    #[test]
    fn symbol_and_eigenvalues_agree() {
        for (sigma, dim) in [(0.5, 9), (2.0, 16), (3.0, 2), (1.0, 1)] {
            let op = SmoothingOperator::new(sigma, dim).unwrap();
            let mut from_symbol: Vec<f64> = op
                .fourier_symbol()
                .iter()
                .map(|s| {
                    assert!(s.re >= 1.0 - 1e-12);
                    assert!(s.im.abs() < 1e-12);
                    1.0 / s.re
                })
                .collect();
            let mut eig = op.eigenvalues().to_vec();
            from_symbol.sort_by(f64::total_cmp);
            eig.sort_by(f64::total_cmp);
            for (a, b) in from_symbol.iter().zip(&eig) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
            let lo = 1.0 / (1.0 + 4.0 * sigma);
            assert!(eig.iter().all(|&l| l >= lo - 1e-15 && l <= 1.0 + 1e-15));
        }
    }

    #[test]
    fn real_basis_is_orthonormal() {
        for dim in [1, 2, 5, 8] {
            let basis = real_fourier_basis(dim);
            assert_eq!(basis.len(), dim);
            for (i, (_, a)) in basis.iter().enumerate() {
                for (j, (_, b)) in basis.iter().enumerate() {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(vecops::dot(a, b), expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn risk_examples() {
        let v = [1.0, -2.0, 0.5, 3.0, 0.0];
        let r = ls_risk(&SmoothingOperator::new(0.0, 5).unwrap(), &v, 0.7).unwrap();
        assert_eq!(r.bias, 0.0);
        assert_abs_diff_eq!(r.variance, 5.0 * 0.49, epsilon = 1e-12);

        let op = SmoothingOperator::new(1.0, 4).unwrap();
        let r = ls_risk(&op, &[1.0, 0.0, 0.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(r.variance, 284.0 / 225.0, epsilon = 1e-12);
        assert_eq!(r.total, r.bias + r.variance);

        let r = ls_risk(&SmoothingOperator::new(2.0, 6).unwrap(), &[4.0; 6], 1.0).unwrap();
        assert_abs_diff_eq!(r.bias, 0.0, epsilon = 1e-24);

        assert!(ls_risk(&op, &[0.0; 4], 0.0).is_err());
    }

    #[test]
    fn monte_carlo_small_noise_vanishes() {
        let op = SmoothingOperator::new(0.0, 6).unwrap();
        let r = risk_monte_carlo(&op, &[1.0; 6], 1e-9, 1, 3).unwrap();
        assert!(r < 1e-15);
        assert!(risk_monte_carlo(&op, &[1.0; 6], 1.0, 0, 3).is_err());
    }

    #[test]
    fn spectrum_examples() {
        let s = spectrum(&[3.0; 10]).unwrap();
        assert_eq!(s.frequencies, (1..=5).collect::<Vec<_>>());
        assert!(s.magnitudes.iter().all(|&m| m < 1e-12));

        let d = 32;
        let k = 5;
        let v: Vec<f64> = (0..d)
            .map(|j| (2.0 * PI * (k * j) as f64 / d as f64).cos())
            .collect();
        let s = spectrum(&v).unwrap();
        for (f, m) in s.frequencies.iter().zip(&s.magnitudes) {
            if *f == k {
                assert_abs_diff_eq!(*m, d as f64 / 2.0, epsilon = 1e-9);
            } else {
                assert!(*m < 1e-9);
            }
        }
        assert!(spectrum(&[1.0]).is_err());
    }

    #[test]
    fn spectrum_csv_and_slope() {
        let s = SpectrumDump {
            frequencies: vec![1, 10, 100],
            magnitudes: vec![1.0, 0.01, 0.0001],
        };
        let mut out = Vec::new();
        s.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("freq,magnitude\n1,"));
        assert_eq!(text.lines().count(), 4);
        assert_abs_diff_eq!(s.loglog_slope().unwrap(), -2.0, epsilon = 1e-12);
    }

    #[test]
    fn transpose_order_smooths_columns() {
        let op = SmoothingOperator::new(1.0, 6).unwrap();
        // 2x3 row-major matrix; column-major walk is 0,3,1,4,2,5.
        let mut v = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        op.apply_ordered(&mut v, FlattenOrder::Transpose { rows: 2, cols: 3 })
            .unwrap();
        let direct = op.apply(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        // position 3 is the cycle neighbour of position 0 in column-major order
        assert_abs_diff_eq!(v[0], direct[0], epsilon = 1e-14);
        assert_abs_diff_eq!(v[3], direct[1], epsilon = 1e-14);
        assert_abs_diff_eq!(v[1], direct[2], epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn smoothing_is_linear_and_contractive(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            sigma in 0.0f64..4.0,
            u in prop::collection::vec(-10.0f64..10.0, 17),
            v in prop::collection::vec(-10.0f64..10.0, 17),
        ) {
            let op = SmoothingOperator::new(sigma, 17).unwrap();
            let su = op.apply(&u).unwrap();
            let sv = op.apply(&v).unwrap();
            let comb: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            let sc = op.apply(&comb).unwrap();
            for i in 0..17 {
                prop_assert!((sc[i] - (a * su[i] + b * sv[i])).abs() < 1e-10);
            }
            prop_assert!(vecops::norm(&su) <= vecops::norm(&u) * (1.0 + 1e-12) + 1e-12);
        }
    }
}
