//! The federated training engine: client selection, clipped local SGD,
//! noisy aggregation, Laplacian smoothing and output averaging.

use std::io::{self, Read, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::lapsmooth::{spectrum, FlattenOrder, SmoothingOperator, SpectrumDump};
use crate::objectives::FederatedObjective;
use crate::privacy::Subsampling;
use crate::rng::{substream, StreamRng, SELECTION_STREAM, SERVER_STREAM};
use crate::vecops;

/// Losses above this (or NaN) abort the run.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalWork {
    Steps(usize),
    /// Passes over the shard; converted to `E·⌈n_j/b⌉` steps.
    Epochs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Last,
    Uniform,
    /// Weights `a_t ∝ q^{−t}`. Without an explicit `q` the engine uses
    /// `q = 1 − μ_σ·η̃·S/2` with `μ_σ = μ·Λ_min`.
    StronglyConvexGeometric { q: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub n_clients: usize,
    pub tau: f64,
    pub subsampling: Subsampling,
    pub rounds: usize,
    pub local: LocalWork,
    pub batch_size: usize,
    pub eta_l: f64,
    pub eta_g: f64,
    pub gamma: f64,
    pub clip: f64,
    pub sigma: f64,
    pub nu: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub averaging: Averaging,
    /// Must be set for `nu = 0`.
    pub non_private: bool,
    pub flatten: FlattenOrder,
    /// 1-based rounds at which the clean federated average is recorded.
    pub spectrum_rounds: Vec<usize>,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            n_clients: 1,
            tau: 1.0,
            subsampling: Subsampling::Uniform,
            rounds: 1,
            local: LocalWork::Steps(1),
            batch_size: 1,
            eta_l: 0.1,
            eta_g: 1.0,
            gamma: 1.0,
            clip: 1.0,
            sigma: 0.0,
            nu: 0.0,
            weight_decay: 0.0,
            seed: 0,
            averaging: Averaging::Last,
            non_private: true,
            flatten: FlattenOrder::Identity,
            spectrum_rounds: Vec::new(),
        }
    }
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && !x.is_nan() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {x}")))
    }
}

fn nonnegative(name: &str, x: f64) -> Result<()> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and nonnegative, got {x}")))
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.batch_size == 0 {
            return Err(Error::invalid("n_clients and batch_size must be positive"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if matches!(self.local, LocalWork::Steps(0) | LocalWork::Epochs(0)) {
            return Err(Error::invalid("local work must be positive"));
        }
        positive("eta_l", self.eta_l)?;
        positive("eta_g", self.eta_g)?;
        positive("clip", self.clip)?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        nonnegative("sigma", self.sigma)?;
        nonnegative("nu", self.nu)?;
        nonnegative("weight_decay", self.weight_decay)?;
        if self.nu == 0.0 && !self.non_private {
            return Err(Error::invalid("nu = 0 requires the run to be marked non-private"));
        }
        if self.subsampling == Subsampling::Uniform && self.uniform_count() == 0 {
            return Err(Error::invalid("tau * n_clients rounds to zero clients"));
        }
        if let Averaging::StronglyConvexGeometric { q: Some(q) } = self.averaging {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::invalid(format!("geometric q must be in (0, 1], got {q}")));
            }
        }
        Ok(())
    }

    /// `round(τN)`, the cohort size under uniform subsampling.
    pub fn uniform_count(&self) -> usize {
        ((self.tau * self.n_clients as f64).round() as usize).min(self.n_clients)
    }

    /// Local step count for a shard of `shard_len` samples.
    pub fn local_steps(&self, shard_len: usize) -> usize {
        match self.local {
            LocalWork::Steps(s) => s,
            LocalWork::Epochs(e) => e * shard_len.div_ceil(self.batch_size),
        }
    }

    /// Local learning rate in round `t` (0-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        self.eta_l * self.gamma.powi(t as i32)
    }
}

/// `v / max(1, ‖v‖/L)`.
pub fn clip(v: &[f64], l: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    clip_in_place(&mut out, l);
    out
}

fn clip_in_place(v: &mut [f64], l: f64) {
    let n = vecops::norm(v);
    if n > l {
        vecops::scale(l / n, v);
    }
}

/// Ascending client indices participating in round `t`.
pub fn select_clients(cfg: &FedConfig, t: usize) -> Vec<usize> {
    let mut rng = substream(cfg.seed, t as u64, SELECTION_STREAM);
    let mut chosen = match cfg.subsampling {
        Subsampling::Uniform => index::sample(&mut rng, cfg.n_clients, cfg.uniform_count()).into_vec(),
        Subsampling::Poisson => (0..cfg.n_clients)
            .filter(|_| rng.random::<f64>() < cfg.tau)
            .collect(),
    };
    chosen.sort_unstable();
    chosen
}

/// Ascending indices of every client selected in at least one round.
pub fn participants(cfg: &FedConfig) -> Vec<usize> {
    let mut seen = vec![false; cfg.n_clients];
    for t in 0..cfg.rounds {
        for j in select_clients(cfg, t) {
            seen[j] = true;
        }
    }
    (0..cfg.n_clients).filter(|&j| seen[j]).collect()
}

/// Runs clipped local SGD for one client and returns `Δ_j = w − w_global`.
///
/// Every step re-centers the local iterate so that `‖w − w_global‖ ≤ L`.
pub fn client_update(
    obj: &dyn FederatedObjective,
    client: usize,
    w_global: &[f64],
    cfg: &FedConfig,
    lr: f64,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let n = obj.client_len(client);
    if n == 0 {
        return Err(Error::invalid(format!("client {client} has no samples")));
    }
    let steps = cfg.local_steps(n);
    let b = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut delta = vec![0.0; w_global.len()];
    let mut w = w_global.to_vec();
    let mut grad = vec![0.0; w.len()];
    for _ in 0..steps {
        if cursor >= n {
            order.shuffle(rng);
            cursor = 0;
        }
        let end = (cursor + b).min(n);
        obj.client_loss_grad(client, &w, &order[cursor..end], &mut grad);
        cursor = end;
        if cfg.weight_decay > 0.0 {
            vecops::axpy(cfg.weight_decay, &w, &mut grad);
        }
        if !vecops::all_finite(&grad) {
            return Err(Error::invalid(format!("non-finite gradient on client {client}")));
        }
        vecops::axpy(-lr, &grad, &mut delta);
        clip_in_place(&mut delta, cfg.clip);
        for ((wi, gi), di) in w.iter_mut().zip(w_global).zip(&delta) {
            *wi = gi + di;
        }
    }
    Ok(delta)
}

/// `(η_g/K)·A_σ⁻¹(Σ_j Δ_j + n)` with `n ~ N(0, ν²I)` drawn from `rng`.
pub fn aggregate(
    deltas: &[Vec<f64>],
    cfg: &FedConfig,
    op: &SmoothingOperator,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let k = deltas.len();
    if k == 0 {
        return Err(Error::invalid("aggregate needs at least one delta"));
    }
    let mut sum = sum_deltas(deltas, op.dim())?;
    if cfg.nu > 0.0 {
        let normal = Normal::new(0.0, cfg.nu).map_err(|e| Error::invalid(e.to_string()))?;
        for s in &mut sum {
            *s += normal.sample(rng);
        }
    }
    op.apply_ordered(&mut sum, cfg.flatten)?;
    vecops::scale(cfg.eta_g / k as f64, &mut sum);
    Ok(sum)
}

fn sum_deltas(deltas: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    for d in deltas {
        check_len(dim, d.len())?;
        vecops::axpy(1.0, d, &mut sum);
    }
    Ok(sum)
}

/// Closed-form variance `E‖x̄_S − x̄‖²` of the mean of a uniformly drawn
/// size-`s` subset of `xs`.
pub fn subset_mean_variance(xs: &[Vec<f64>], s: usize) -> Result<f64> {
    let n = xs.len();
    if n == 0 || s == 0 || s > n {
        return Err(Error::invalid(format!("need 1 <= s <= n, got s={s}, n={n}")));
    }
    if n == 1 {
        return Ok(0.0);
    }
    let dim = xs[0].len();
    let mut mean = sum_deltas(xs, dim)?;
    vecops::scale(1.0 / n as f64, &mut mean);
    let spread: f64 = xs.iter().map(|x| vecops::norm_sq(&vecops::sub(x, &mean))).sum::<f64>() / n as f64;
    let (s, n) = (s as f64, n as f64);
    Ok(spread / s * (1.0 - (s - 1.0) / (n - 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    /// 1-based index of the completed round.
    pub round: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub grad_norm: f64,
    pub k_selected: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub records: Vec<RoundRecord>,
    /// `(round, spectrum of (1/K)ΣΔ_j)` for each requested round that had
    /// participants.
    pub spectra: Vec<(usize, SpectrumDump)>,
    /// Set when the run stopped early.
    pub aborted: Option<String>,
}

pub const METRICS_HEADER: &str = "round,train_loss,val_loss,train_acc,val_acc,grad_norm,k_selected";

impl RunMetrics {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        fn opt(x: Option<f64>) -> String {
            x.map(|v| v.to_string()).unwrap_or_default()
        }
        writeln!(w, "{METRICS_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.round,
                r.train_loss,
                opt(r.val_loss),
                opt(r.train_acc),
                opt(r.val_acc),
                r.grad_norm,
                r.k_selected
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub w_out: Vec<f64>,
    /// The last iterate `w^T`, regardless of averaging.
    pub w_last: Vec<f64>,
    pub metrics: RunMetrics,
}

fn geometric_q(obj: &dyn FederatedObjective, cfg: &FedConfig, op: &SmoothingOperator, q: Option<f64>) -> Result<f64> {
    if let Some(q) = q {
        return Ok(q);
    }
    let mu = obj
        .strong_convexity()
        .ok_or_else(|| Error::invalid("geometric averaging needs a strongly convex objective"))?;
    let steps = cfg.local_steps(obj.client_len(0)) as f64;
    let q = 1.0 - mu * op.min_eigenvalue() * cfg.eta_l * cfg.eta_g * steps / 2.0;
    if q > 0.0 && q < 1.0 {
        Ok(q)
    } else {
        Err(Error::invalid(format!("derived geometric ratio {q} is outside (0, 1)")))
    }
}

/// Streaming weighted average of iterates.
struct IterateAverage {
    mode: Averaging,
    q: f64,
    acc: Vec<f64>,
    weight: f64,
}

impl IterateAverage {
    fn new(mode: Averaging, q: f64, w0: &[f64]) -> Self {
        Self {
            mode,
            q,
            acc: w0.to_vec(),
            weight: 1.0,
        }
    }

    fn push(&mut self, w: &[f64]) {
        match self.mode {
            Averaging::Last => {}
            Averaging::Uniform => {
                vecops::axpy(1.0, w, &mut self.acc);
                self.weight += 1.0;
            }
            Averaging::StronglyConvexGeometric { .. } => {
                // Σ q^{−t} w^t rescaled by q each step so weights stay bounded.
                vecops::scale(self.q, &mut self.acc);
                vecops::axpy(1.0, w, &mut self.acc);
                self.weight = self.weight * self.q + 1.0;
            }
        }
    }

    fn finish(mut self, last: &[f64]) -> Vec<f64> {
        if self.mode == Averaging::Last {
            return last.to_vec();
        }
        vecops::scale(1.0 / self.weight, &mut self.acc);
        self.acc
    }
}

fn diverged(eval_loss: f64) -> bool {
    eval_loss.is_nan() || eval_loss > DIVERGENCE_LOSS
}

/// Runs training from `w0` for `cfg.rounds` rounds.
pub fn run(obj: &dyn FederatedObjective, cfg: &FedConfig, w0: &[f64]) -> Result<RunOutput> {
    run_with_observer(obj, cfg, w0, |_| {})
}

/// As [`run`], calling `observer` after each completed round.
pub fn run_with_observer(
    obj: &dyn FederatedObjective,
    cfg: &FedConfig,
    w0: &[f64],
    mut observer: impl FnMut(&RoundRecord),
) -> Result<RunOutput> {
    cfg.validate()?;
    check_len(obj.dim(), w0.len())?;
    check_len(cfg.n_clients, obj.n_clients())?;
    let op = SmoothingOperator::new(cfg.sigma, obj.dim())?;
    let q = match cfg.averaging {
        Averaging::StronglyConvexGeometric { q } => geometric_q(obj, cfg, &op, q)?,
        _ => 1.0,
    };
    let mut w = w0.to_vec();
    let mut avg = IterateAverage::new(cfg.averaging, q, &w);
    let mut metrics = RunMetrics::default();

    for t in 0..cfg.rounds {
        let lr = cfg.lr_at(t);
        let selected = select_clients(cfg, t);
        let k = selected.len();
        if k > 0 {
            let results: Vec<Result<Vec<f64>>> = selected
                .par_iter()
                .map(|&c| {
                    let mut rng = substream(cfg.seed, t as u64, c as u64);
                    client_update(obj, c, &w, cfg, lr, &mut rng)
                })
                .collect();
            let mut deltas = Vec::with_capacity(k);
            for r in results {
                match r {
                    Ok(d) => deltas.push(d),
                    Err(e) => {
                        metrics.aborted = Some(format!("round {}: {e}", t + 1));
                        return Ok(finish(avg, w, metrics));
                    }
                }
            }
            if cfg.spectrum_rounds.contains(&(t + 1)) && obj.dim() >= 2 {
                let mut mean = sum_deltas(&deltas, obj.dim())?;
                vecops::scale(1.0 / k as f64, &mut mean);
                metrics.spectra.push((t + 1, spectrum(&mean)?));
            }
            let mut server_rng = substream(cfg.seed, t as u64, SERVER_STREAM);
            let update = aggregate(&deltas, cfg, &op, &mut server_rng)?;
            vecops::axpy(1.0, &update, &mut w);
        }
        // an empty Poisson round still counts and still decays the lr

        let eval = obj.evaluate(&w);
        let record = RoundRecord {
            round: t + 1,
            train_loss: eval.train_loss,
            val_loss: eval.val_loss,
            train_acc: eval.train_acc,
            val_acc: eval.val_acc,
            grad_norm: eval.grad_norm,
            k_selected: k,
        };
        observer(&record);
        metrics.records.push(record);
        if diverged(eval.train_loss) || !vecops::all_finite(&w) {
            metrics.aborted = Some(format!("diverged at round {} (loss {})", t + 1, eval.train_loss));
            return Ok(finish(avg, w, metrics));
        }
        avg.push(&w);
    }
    Ok(finish(avg, w, metrics))
}

fn finish(avg: IterateAverage, w: Vec<f64>, metrics: RunMetrics) -> RunOutput {
    RunOutput {
        w_out: avg.finish(&w),
        w_last: w,
        metrics,
    }
}

/// Writes `len` as a little-endian u64 followed by the values as
/// little-endian f64.
pub fn write_model<W: Write>(w: &[f64], mut out: W) -> io::Result<()> {
    out.write_all(&(w.len() as u64).to_le_bytes())?;
    for x in w {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::invalid("model file shorter than its header"))?;
    let len = u64::from_le_bytes(header) as usize;
    let payload = &bytes[8..];
    if payload.len() != len.saturating_mul(8) {
        return Err(Error::invalid(format!(
            "model header says {len} values, payload holds {} bytes",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}
