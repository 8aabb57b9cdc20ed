//! Multiclass logistic regression (softmax cross-entropy).
//!
//! Weights are a `classes × features` matrix stored row-major, so a flat
//! parameter vector walks one class's feature weights before the next.

use std::sync::Arc;

use serde::Serialize;

use super::{Evaluation, FederatedObjective};
use crate::data::{ClientShard, Dataset, Partition};
use crate::error::{check_len, Error, Result};
use crate::vecops;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub classes: usize,
    pub features: usize,
}

impl LogisticModel {
    /// All-zero weights.
    pub fn zeros(classes: usize, features: usize) -> Result<Self> {
        if classes < 2 || features == 0 {
            return Err(Error::invalid("logistic model needs >= 2 classes and >= 1 feature"));
        }
        Ok(Self {
            weights: vec![0.0; classes * features],
            classes,
            features,
        })
    }

    pub fn from_weights(weights: Vec<f64>, classes: usize, features: usize) -> Result<Self> {
        check_len(classes * features, weights.len())?;
        if classes < 2 {
            return Err(Error::invalid("logistic model needs >= 2 classes"));
        }
        Ok(Self {
            weights,
            classes,
            features,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut logits = vec![0.0; self.classes];
        compute_logits(&self.weights, x, &mut logits);
        argmax(&logits)
    }

    /// Cross-entropy of a single sample.
    pub fn sample_loss(&self, x: &[f64], label: usize) -> f64 {
        let mut logits = vec![0.0; self.classes];
        compute_logits(&self.weights, x, &mut logits);
        log_sum_exp(&logits) - logits[label]
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        check_len(self.features, data.n_features)?;
        if data.n_classes > self.classes {
            return Err(Error::invalid(format!(
                "dataset has {} classes, model has {}",
                data.n_classes, self.classes
            )));
        }
        Ok(())
    }
}

fn compute_logits(weights: &[f64], x: &[f64], out: &mut [f64]) {
    let f = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        *o = vecops::dot(&weights[c * f..(c + 1) * f], x);
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Accumulates `Σ ∇ℓ_i` into `grad` over the given rows and returns `Σ ℓ_i`
/// together with the number of correct predictions.
fn accumulate<'a>(
    weights: &[f64],
    classes: usize,
    rows: impl Iterator<Item = (&'a [f64], usize)>,
    grad: &mut [f64],
) -> (f64, usize) {
    let mut logits = vec![0.0; classes];
    let mut loss = 0.0;
    let mut correct = 0;
    for (x, label) in rows {
        let f = x.len();
        compute_logits(weights, x, &mut logits);
        let lse = log_sum_exp(&logits);
        loss += lse - logits[label];
        correct += usize::from(argmax(&logits) == label);
        for c in 0..classes {
            let p = (logits[c] - lse).exp();
            let coef = if c == label { p - 1.0 } else { p };
            if coef != 0.0 {
                vecops::axpy(coef, x, &mut grad[c * f..(c + 1) * f]);
            }
        }
    }
    (loss, correct)
}

/// Mean cross-entropy over `indices` of `data` plus `(λ₀/2)‖w‖²`, and its
/// gradient.
pub fn logistic_grad(
    model: &LogisticModel,
    data: &Dataset,
    indices: &[usize],
    weight_decay: f64,
) -> Result<(f64, Vec<f64>)> {
    model.check_data(data)?;
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::invalid(format!("row {i} out of range")));
    }
    let mut grad = vec![0.0; model.dim()];
    let rows = indices.iter().map(|&i| (data.row(i), data.labels[i]));
    let n = indices.len() as f64;
    let loss = accumulate(&model.weights, model.classes, rows, &mut grad).0 / n;
    vecops::scale(1.0 / n, &mut grad);
    vecops::axpy(weight_decay, &model.weights, &mut grad);
    Ok((loss + 0.5 * weight_decay * vecops::norm_sq(&model.weights), grad))
}

/// Mean loss and accuracy over the selected rows.
pub fn evaluate_rows(model: &LogisticModel, data: &Dataset, indices: &[usize]) -> (f64, f64) {
    if indices.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut logits = vec![0.0; model.classes];
    let (mut loss, mut correct) = (0.0, 0usize);
    for &i in indices {
        compute_logits(&model.weights, data.row(i), &mut logits);
        loss += log_sum_exp(&logits) - logits[data.labels[i]];
        correct += usize::from(argmax(&logits) == data.labels[i]);
    }
    let n = indices.len() as f64;
    (loss / n, correct as f64 / n)
}

/// Logistic regression split across client shards, with an optional
/// validation set for reporting.
#[derive(Debug, Clone)]
pub struct FederatedLogistic {
    shards: Vec<ClientShard>,
    train: Arc<Dataset>,
    train_rows: Vec<usize>,
    validation: Option<(Arc<Dataset>, Vec<usize>)>,
    classes: usize,
    features: usize,
}

impl FederatedLogistic {
    pub fn new(partition: &Partition, classes: usize) -> Result<Self> {
        let first = partition
            .shards
            .first()
            .ok_or_else(|| Error::invalid("partition has no clients"))?;
        let train = Arc::clone(&first.data);
        if classes < train.n_classes {
            return Err(Error::invalid("fewer model classes than dataset classes"));
        }
        if partition.shards.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("empty client shard"));
        }
        Ok(Self {
            shards: partition.shards.clone(),
            train_rows: partition.train_indices(),
            features: train.n_features,
            train,
            validation: None,
            classes,
        })
    }

    pub fn with_validation(mut self, data: Arc<Dataset>, rows: Vec<usize>) -> Result<Self> {
        check_len(self.features, data.n_features)?;
        self.validation = Some((data, rows));
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn model(&self, w: &[f64]) -> Result<LogisticModel> {
        LogisticModel::from_weights(w.to_vec(), self.classes, self.features)
    }
}

impl FederatedObjective for FederatedLogistic {
    fn dim(&self) -> usize {
        self.classes * self.features
    }

    fn n_clients(&self) -> usize {
        self.shards.len()
    }

    fn client_len(&self, client: usize) -> usize {
        self.shards[client].len()
    }

    fn client_loss_grad(&self, client: usize, w: &[f64], batch: &[usize], grad: &mut [f64]) -> f64 {
        let shard = &self.shards[client];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let rows = batch.iter().map(|&i| (shard.row(i), shard.label(i)));
        let n = batch.len() as f64;
        let (loss, _) = accumulate(w, self.classes, rows, grad);
        vecops::scale(1.0 / n, grad);
        loss / n
    }

    fn evaluate(&self, w: &[f64]) -> Evaluation {
        let mut grad = vec![0.0; w.len()];
        let rows = self.train_rows.iter().map(|&i| (self.train.row(i), self.train.labels[i]));
        let n = self.train_rows.len() as f64;
        let (loss_sum, correct) = accumulate(w, self.classes, rows, &mut grad);
        let grad_norm = vecops::norm(&grad) / n;
        let (val_loss, val_acc) = match &self.validation {
            Some((data, rows)) => {
                let model = LogisticModel {
                    weights: w.to_vec(),
                    classes: self.classes,
                    features: self.features,
                };
                let (l, a) = evaluate_rows(&model, data, rows);
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let (train_loss, train_acc) = (loss_sum / n, correct as f64 / n);
        Evaluation {
            train_loss,
            train_acc: Some(train_acc),
            val_loss,
            val_acc,
            grad_norm,
        }
    }
}
