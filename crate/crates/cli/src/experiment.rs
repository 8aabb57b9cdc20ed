//! Dataset wiring, repeated runs and artifact export for `fedls run`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fedls::data::{load_mnist, partition, synth_classification, Dataset, Partition};
use fedls::fedsim::{run, write_model, RunOutput};
use fedls::objectives::{evaluate_rows, quad_eval, FederatedLogistic, FederatedObjective, LogisticModel, QuadraticFamily};
use fedls::objectives::quad_make;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{DataSource, ExperimentConfig, NoisePlan, Overrides};
use crate::error::{CliError, Result};

/// Seed offset for the held-out synthetic test draw.
const SYNTH_TEST_SALT: u64 = 0x7e57_7e57_7e57_7e57;

/// Training and test rows for a classification source.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Arc<Dataset>,
    pub test: Option<Dataset>,
}

/// Loads the classification data named by the config; `None` for quadratics.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Option<Corpus>> {
    let d = &cfg.data;
    let (train, test) = match &d.source {
        DataSource::Quadratic { .. } => return Ok(None),
        DataSource::Mnist { .. } => {
            let (train, test) = load_mnist(cfg.mnist_dir()?)?;
            (train, test)
        }
        DataSource::Synthetic {
            samples,
            dim,
            classes,
            separation,
        } => {
            let seed = cfg.fed.seed;
            let train = synth_classification(*samples, *dim, *classes, *separation, seed)?;
            let test = synth_classification((samples / 5).max(1), *dim, *classes, *separation, seed ^ SYNTH_TEST_SALT)?;
            (train, test)
        }
    };
    let prep = |ds: Dataset| -> Result<Dataset> {
        let ds = ds.scaled(d.scaling)?;
        Ok(if d.bias_feature { ds.with_bias_feature() } else { ds })
    };
    Ok(Some(Corpus {
        train: Arc::new(prep(train)?),
        test: Some(prep(test)?),
    }))
}

/// The objective of one repeat together with what is needed to evaluate it.
pub enum Problem {
    Logistic {
        objective: FederatedLogistic,
        partition: Partition,
        test: Option<Dataset>,
    },
    Quadratic(QuadraticFamily),
}

impl Problem {
    pub fn objective(&self) -> &dyn FederatedObjective {
        match self {
            Problem::Logistic { objective, .. } => objective,
            Problem::Quadratic(q) => q,
        }
    }
}

pub fn build_partition(cfg: &ExperimentConfig, corpus: &Corpus, seed: u64) -> Result<Partition> {
    Ok(partition(
        Arc::clone(&corpus.train),
        cfg.data.n_clients,
        cfg.data.per_client,
        seed,
        cfg.data.scheme,
    )?)
}

pub fn build_problem(cfg: &ExperimentConfig, corpus: Option<&Corpus>, seed: u64) -> Result<Problem> {
    let d = &cfg.data;
    match (&d.source, corpus) {
        (
            DataSource::Quadratic {
                dim,
                mu,
                beta,
                hetero_g,
                sample_noise,
            },
            _,
        ) => {
            let mut fam = quad_make(d.n_clients, *dim, *mu, *beta, *hetero_g, seed)?;
            if d.per_client > 1 || *sample_noise > 0.0 {
                fam = fam.with_sample_noise(d.per_client, *sample_noise, seed)?;
            }
            Ok(Problem::Quadratic(fam))
        }
        (_, Some(corpus)) => {
            let part = build_partition(cfg, corpus, seed)?;
            let mut objective = FederatedLogistic::new(&part, corpus.train.n_classes)?;
            if !part.holdout.is_empty() {
                objective = objective.with_validation(Arc::clone(&corpus.train), part.holdout.clone())?;
            }
            Ok(Problem::Logistic {
                objective,
                partition: part,
                test: corpus.test.clone(),
            })
        }
        (_, None) => Err(CliError::usage("classification source needs a loaded corpus")),
    }
}

/// Metrics of the returned model `w_out`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub train_loss: f64,
    pub grad_norm: f64,
    pub train_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    /// `f(w) − f*`, quadratic objectives only.
    pub gap: Option<f64>,
}

impl FinalMetrics {
    fn fields(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("train_loss", Some(self.train_loss)),
            ("grad_norm", Some(self.grad_norm)),
            ("train_acc", self.train_acc),
            ("val_loss", self.val_loss),
            ("val_acc", self.val_acc),
            ("test_loss", self.test_loss),
            ("test_acc", self.test_acc),
            ("gap", self.gap),
        ]
    }
}

pub fn final_metrics(problem: &Problem, w: &[f64]) -> Result<FinalMetrics> {
    let e = problem.objective().evaluate(w);
    let mut m = FinalMetrics {
        train_loss: e.train_loss,
        grad_norm: e.grad_norm,
        train_acc: e.train_acc,
        val_loss: e.val_loss,
        val_acc: e.val_acc,
        ..FinalMetrics::default()
    };
    match problem {
        Problem::Logistic { objective, test, .. } => {
            if let Some(test) = test {
                let model = objective.model(w)?;
                let rows: Vec<usize> = (0..test.len()).collect();
                let (loss, acc) = evaluate_rows(&model, test, &rows);
                m.test_loss = Some(loss);
                m.test_acc = Some(acc);
            }
        }
        Problem::Quadratic(q) => m.gap = Some(quad_eval(q, w)?.gap),
    }
    Ok(m)
}

pub struct RepeatResult {
    pub index: usize,
    pub seed: u64,
    pub output: RunOutput,
    pub metrics: FinalMetrics,
}

impl RepeatResult {
    pub fn aborted(&self) -> Option<&str> {
        self.output.metrics.aborted.as_deref()
    }
}

pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub plan: NoisePlan,
    pub repeats: Vec<RepeatResult>,
}

impl ExperimentOutcome {
    pub fn any_aborted(&self) -> bool {
        self.repeats.iter().any(|r| r.aborted().is_some())
    }

    /// Mean and sample standard deviation of each final metric over the
    /// repeats that report it and did not abort.
    pub fn aggregate(&self) -> Map<String, Value> {
        let ok: Vec<&RepeatResult> = self.repeats.iter().filter(|r| r.aborted().is_none()).collect();
        let mut out = Map::new();
        let Some(first) = ok.first() else { return out };
        for (i, (name, _)) in first.metrics.fields().iter().enumerate() {
            let xs: Option<Vec<f64>> = ok.iter().map(|r| r.metrics.fields()[i].1).collect();
            let Some(xs) = xs else { continue };
            let (mean, std) = mean_std(&xs);
            out.insert((*name).to_owned(), json!({"mean": mean, "std": std, "n": xs.len()}));
        }
        out
    }

    pub fn summary(&self) -> Value {
        let repeats: Vec<Value> = self
            .repeats
            .iter()
            .map(|r| {
                json!({
                    "repeat": r.index,
                    "seed": r.seed,
                    "rounds_completed": r.output.metrics.records.len(),
                    "aborted": r.aborted(),
                    "final": r.metrics,
                })
            })
            .collect();
        json!({
            "privacy": self.plan,
            "repeats": repeats,
            "aggregate": self.aggregate(),
            "aborted": self.any_aborted(),
        })
    }
}

/// Sample mean and standard deviation (`n − 1` denominator, 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::usage(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs every repeat of `cfg` with the given corpus; nothing is written.
pub fn run_experiment_with(cfg: &ExperimentConfig, corpus: Option<&Corpus>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let plan = cfg.noise_plan()?;
    let mut repeats = Vec::with_capacity(cfg.output.repeat);
    for index in 0..cfg.output.repeat {
        let seed = cfg.repeat_seed(index);
        let problem = build_problem(cfg, corpus, seed)?;
        let fed = cfg.fed_config(seed, plan.nu);
        let obj = problem.objective();
        let w0 = vec![0.0; obj.dim()];
        let output = in_pool(cfg.fed.threads, || run(obj, &fed, &w0))??;
        let metrics = final_metrics(&problem, &output.w_out)?;
        repeats.push(RepeatResult {
            index,
            seed,
            output,
            metrics,
        });
    }
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        plan,
        repeats,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let corpus = load_corpus(cfg)?;
    run_experiment_with(cfg, corpus.as_ref())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn metrics_path(dir: &Path, repeat: usize) -> PathBuf {
    dir.join(format!("metrics_{repeat}.csv"))
}

pub fn model_path(dir: &Path, repeat: usize) -> PathBuf {
    dir.join(format!("model_{repeat}.bin"))
}

pub fn spectrum_path(dir: &Path, repeat: usize, round: usize) -> PathBuf {
    dir.join(format!("spectrum_{repeat}_round{round}.csv"))
}

/// Writes `config.json`, per-repeat metrics, models and spectra, and
/// `summary.json` into `dir`.
pub fn write_artifacts(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, outcome.config.canonical() + "\n").map_err(|e| CliError::io(&cfg_path, e))?;
    for r in &outcome.repeats {
        write_with(&metrics_path(dir, r.index), |w| r.output.metrics.write_csv(w))?;
        write_with(&model_path(dir, r.index), |w| write_model(&r.output.w_out, w))?;
        for (round, spec) in &r.output.metrics.spectra {
            write_with(&spectrum_path(dir, r.index, *round), |w| spec.write_csv(w))?;
        }
    }
    let summary_path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&outcome.summary())? + "\n";
    fs::write(&summary_path, text).map_err(|e| CliError::io(&summary_path, e))?;
    Ok(())
}

/// `fedls run`: loads the config, applies overrides, runs and writes
/// artifacts. Divergence still writes everything, then reports
/// [`CliError::Diverged`].
pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<ExperimentOutcome> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    cfg.apply(overrides)?;
    let outcome = run_experiment(&cfg)?;
    write_artifacts(&outcome, &cfg.output.dir)?;
    if outcome.any_aborted() {
        let why: Vec<String> = outcome
            .repeats
            .iter()
            .filter_map(|r| r.aborted().map(|a| format!("repeat {}: {a}", r.index)))
            .collect();
        return Err(CliError::Diverged(why.join("; ")));
    }
    Ok(outcome)
}

/// Rebuilds the logistic model stored in `w` for the config's data shape.
pub fn logistic_model(corpus: &Corpus, w: Vec<f64>) -> Result<LogisticModel> {
    Ok(LogisticModel::from_weights(
        w,
        corpus.train.n_classes,
        corpus.train.n_features,
    )?)
}
