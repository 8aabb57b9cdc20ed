//! Synthetic heterogeneous quadratics `f_j(w) = ½wᵀA_j w − b_jᵀw` with a
//! known optimum.
//!
//! Each client optionally holds `m` "samples" whose linear perturbations
//! `e_{j,i}` sum to zero, so mini-batch gradients are unbiased but noisy.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{Evaluation, FederatedObjective};
use crate::error::{check_len, Error, Result};
use crate::rng::substream;

// stream ids local to quad_make; disjoint from client ids used elsewhere
const SPECTRUM_STREAM: u64 = 0;
const HETERO_STREAM: u64 = 1;
const SHARED_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;

#[derive(Debug, Clone)]
pub struct QuadraticFamily {
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    a_mean: DMatrix<f64>,
    b_mean: DVector<f64>,
    /// Per-client sample perturbations; each client's rows sum to zero.
    samples: Vec<Vec<DVector<f64>>>,
    w_star: DVector<f64>,
    f_star: f64,
    mu: f64,
    beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub gap: f64,
}

fn random_orthogonal(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign fix so Q is Haar distributed
    for k in 0..dim {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

fn gaussian_vector(dim: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Builds `n_clients` quadratics in `dim` variables.
///
/// Client spectra are log-uniform in `[mu, beta]`; `hetero_g` scales the
/// zero-sum shifts `g_j` that move client optima apart.
pub fn quad_make(
    n_clients: usize,
    dim: usize,
    mu: f64,
    beta: f64,
    hetero_g: f64,
    seed: u64,
) -> Result<QuadraticFamily> {
    if n_clients == 0 || dim == 0 {
        return Err(Error::invalid("need at least one client and one dimension"));
    }
    if !(mu > 0.0 && mu <= beta && beta.is_finite()) {
        return Err(Error::invalid(format!("need 0 < mu <= beta, got mu={mu}, beta={beta}")));
    }
    if !(hetero_g >= 0.0 && hetero_g.is_finite()) {
        return Err(Error::invalid("hetero_g must be nonnegative"));
    }
    let (ln_mu, ln_beta) = (mu.ln(), beta.ln());
    let a: Vec<DMatrix<f64>> = (0..n_clients)
        .map(|j| {
            let mut rng = substream(seed, j as u64, SPECTRUM_STREAM);
            let q = random_orthogonal(dim, &mut rng);
            let spectrum = DVector::from_fn(dim, |_, _| {
                (ln_mu + (ln_beta - ln_mu) * rng.random::<f64>()).exp()
            });
            let a = &q * DMatrix::from_diagonal(&spectrum) * q.transpose();
            // symmetrize away rounding
            (&a + a.transpose()) * 0.5
        })
        .collect();

    let w_shared = gaussian_vector(dim, &mut substream(seed, 0, SHARED_STREAM));
    let z: Vec<DVector<f64>> = (0..n_clients)
        .map(|j| gaussian_vector(dim, &mut substream(seed, j as u64, HETERO_STREAM)))
        .collect();
    let z_mean = z.iter().fold(DVector::zeros(dim), |acc, v| acc + v) / n_clients as f64;
    let shift = hetero_g / (dim as f64).sqrt();
    let b: Vec<DVector<f64>> = a
        .iter()
        .zip(&z)
        .map(|(a_j, z_j)| a_j * &w_shared + (z_j - &z_mean) * shift)
        .collect();

    let samples = vec![Vec::new(); n_clients];
    QuadraticFamily::assemble(a, b, samples)
}

impl QuadraticFamily {
    fn assemble(
        a: Vec<DMatrix<f64>>,
        b: Vec<DVector<f64>>,
        samples: Vec<Vec<DVector<f64>>>,
    ) -> Result<Self> {
        let n = a.len() as f64;
        let dim = a[0].nrows();
        let a_mean = a.iter().fold(DMatrix::zeros(dim, dim), |acc, m| acc + m) / n;
        let b_mean = b.iter().fold(DVector::zeros(dim), |acc, v| acc + v) / n;
        let eig = a_mean.clone().symmetric_eigen();
        let mu = eig.eigenvalues.min();
        let beta = eig.eigenvalues.max();
        let w_star = a_mean
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("mean Hessian is not positive definite"))?
            .solve(&b_mean);
        let f_star = 0.5 * w_star.dot(&(&a_mean * &w_star)) - b_mean.dot(&w_star);
        Ok(Self {
            a,
            b,
            a_mean,
            b_mean,
            samples,
            w_star,
            f_star,
            mu,
            beta,
        })
    }

    /// Gives every client `per_client` samples whose gradient perturbations
    /// have per-coordinate scale `noise` and sum to zero within the client.
    pub fn with_sample_noise(mut self, per_client: usize, noise: f64, seed: u64) -> Result<Self> {
        if per_client == 0 || !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::invalid("need per_client >= 1 and finite noise >= 0"));
        }
        let dim = self.dim();
        self.samples = (0..self.a.len())
            .map(|j| {
                let mut rng = substream(seed, j as u64, SAMPLE_STREAM);
                let raw: Vec<DVector<f64>> =
                    (0..per_client).map(|_| gaussian_vector(dim, &mut rng) * noise).collect();
                let mean = raw.iter().fold(DVector::zeros(dim), |acc, v| acc + v) / per_client as f64;
                raw.into_iter().map(|v| v - &mean).collect()
            })
            .collect();
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.b_mean.len()
    }

    /// Smallest eigenvalue of the mean Hessian.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Largest eigenvalue of the mean Hessian.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn w_star(&self) -> &[f64] {
        self.w_star.as_slice()
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn client_hessian(&self, client: usize) -> &DMatrix<f64> {
        &self.a[client]
    }

    pub fn client_linear(&self, client: usize) -> &DVector<f64> {
        &self.b[client]
    }

    pub fn mean_hessian(&self) -> &DMatrix<f64> {
        &self.a_mean
    }

    pub fn mean_linear(&self) -> &DVector<f64> {
        &self.b_mean
    }

    /// `∇f_j(w) = A_j w − b_j`.
    pub fn client_gradient(&self, client: usize, w: &[f64]) -> Vec<f64> {
        let w = DVector::from_column_slice(w);
        (&self.a[client] * w - &self.b[client]).data.into()
    }

    /// `(1/N) Σ_j ‖∇f_j(w)‖²`.
    pub fn dissimilarity(&self, w: &[f64]) -> f64 {
        let w = DVector::from_column_slice(w);
        let total: f64 = self
            .a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| (a * &w - b).norm_squared())
            .sum();
        total / self.a.len() as f64
    }
}

/// Exact mean objective, gradient and suboptimality `f(w) − f(w*)`.
pub fn quad_eval(family: &QuadraticFamily, w: &[f64]) -> Result<QuadEval> {
    check_len(family.dim(), w.len())?;
    let w = DVector::from_column_slice(w);
    let aw = &family.a_mean * &w;
    let value = 0.5 * w.dot(&aw) - family.b_mean.dot(&w);
    let grad = aw - &family.b_mean;
    // Gap via the error form ½(w−w*)ᵀA(w−w*), which stays accurate near w*.
    let e = &w - &family.w_star;
    let gap = (0.5 * e.dot(&(&family.a_mean * &e))).max(0.0);
    Ok(QuadEval {
        value,
        grad: grad.data.into(),
        gap,
    })
}

impl FederatedObjective for QuadraticFamily {
    fn dim(&self) -> usize {
        QuadraticFamily::dim(self)
    }

    fn n_clients(&self) -> usize {
        self.a.len()
    }

    fn client_len(&self, client: usize) -> usize {
        self.samples[client].len().max(1)
    }

    fn client_loss_grad(&self, client: usize, w: &[f64], batch: &[usize], grad: &mut [f64]) -> f64 {
        let wv = DVector::from_column_slice(w);
        let aw = &self.a[client] * &wv;
        let mut g = &aw - &self.b[client];
        let mut loss = 0.5 * wv.dot(&aw) - self.b[client].dot(&wv);
        let samples = &self.samples[client];
        if !samples.is_empty() && !batch.is_empty() {
            let mut e = DVector::zeros(w.len());
            for &i in batch {
                e += &samples[i];
            }
            e /= batch.len() as f64;
            g -= &e;
            loss -= e.dot(&wv);
        }
        grad.copy_from_slice(g.as_slice());
        loss
    }

    fn evaluate(&self, w: &[f64]) -> Evaluation {
        let w = DVector::from_column_slice(w);
        let aw = &self.a_mean * &w;
        Evaluation {
            train_loss: 0.5 * w.dot(&aw) - self.b_mean.dot(&w),
            train_acc: None,
            val_loss: None,
            val_acc: None,
            grad_norm: (aw - &self.b_mean).norm(),
        }
    }

    fn strong_convexity(&self) -> Option<f64> {
        Some(self.mu)
    }
}
