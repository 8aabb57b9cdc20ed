//! Loss models the federated engine optimizes.

mod logistic;
mod quadratic;

pub use logistic::{evaluate_rows, logistic_grad, FederatedLogistic, LogisticModel};
pub use quadratic::{quad_eval, quad_make, QuadEval, QuadraticFamily};

use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::lapsmooth::SmoothingOperator;
use crate::vecops;

/// Metrics reported after each round. Losses exclude weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Norm of the full training-loss gradient.
    pub grad_norm: f64,
}

/// A finite-sum objective split across clients.
///
/// Sample indices passed to [`client_loss_grad`](Self::client_loss_grad) are
/// local to the client, in `0..client_len(client)`.
pub trait FederatedObjective: Sync {
    fn dim(&self) -> usize;

    fn n_clients(&self) -> usize;

    fn client_len(&self, client: usize) -> usize;

    /// Writes the mean gradient over `batch` into `grad` and returns the mean
    /// loss.
    fn client_loss_grad(&self, client: usize, w: &[f64], batch: &[usize], grad: &mut [f64]) -> f64;

    fn evaluate(&self, w: &[f64]) -> Evaluation;

    /// Strong-convexity modulus of the global objective, when known.
    fn strong_convexity(&self) -> Option<f64> {
        None
    }
}

/// Empirical `E‖g_B(w) − ∇f_j(w)‖²` in the `A_σ⁻¹` norm, averaged over the
/// supplied mini-batches of `client`.
pub fn gradient_noise_energy(
    obj: &dyn FederatedObjective,
    client: usize,
    w: &[f64],
    batches: &[Vec<usize>],
    op: &SmoothingOperator,
) -> Result<f64> {
    check_len(obj.dim(), w.len())?;
    check_len(obj.dim(), op.dim())?;
    if client >= obj.n_clients() {
        return Err(Error::invalid(format!("client {client} out of range")));
    }
    if batches.is_empty() || batches.iter().any(Vec::is_empty) {
        return Err(Error::invalid("need at least one nonempty batch"));
    }
    let all: Vec<usize> = (0..obj.client_len(client)).collect();
    let mut full = vec![0.0; w.len()];
    obj.client_loss_grad(client, w, &all, &mut full);
    let mut g = vec![0.0; w.len()];
    let mut total = 0.0;
    for batch in batches {
        obj.client_loss_grad(client, w, batch, &mut g);
        vecops::axpy(-1.0, &full, &mut g);
        total += op.inverse_quadratic_form(&g)?;
    }
    Ok(total / batches.len() as f64)
}
