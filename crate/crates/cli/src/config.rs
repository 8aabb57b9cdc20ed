//! Experiment configuration: a JSON document with `data`, `fed`, `privacy`
//! and `output` sections.

use std::fs;
use std::path::{Path, PathBuf};

use fedls::data::{PartitionScheme, PixelScaling};
use fedls::fedsim::{Averaging, FedConfig, LocalWork};
use fedls::lapsmooth::FlattenOrder;
use fedls::privacy::{
    budget_from_noise, calibrate_noise, default_delta, Mechanism, Subsampling, DEFAULT_LAMBDA_GRID,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, Result};

/// Environment variable naming the dataset root; MNIST is read from
/// `$FEDLS_DATA_DIR/mnist` unless the config gives a directory.
pub const DATA_DIR_ENV: &str = "FEDLS_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
    /// Gaussian clusters; a second draw of `samples / 5` rows is the test set.
    Synthetic {
        samples: usize,
        dim: usize,
        classes: usize,
        separation: f64,
    },
    /// Heterogeneous quadratics; `per_client` sets the sample count used for
    /// stochastic gradients.
    Quadratic {
        dim: usize,
        mu: f64,
        beta: f64,
        hetero_g: f64,
        #[serde(default)]
        sample_noise: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_clients: usize,
    pub per_client: usize,
    #[serde(default = "default_scheme")]
    pub scheme: PartitionScheme,
    #[serde(default)]
    pub scaling: PixelScaling,
    #[serde(default)]
    pub bias_feature: bool,
}

fn default_scheme() -> PartitionScheme {
    PartitionScheme::Iid
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSection {
    pub tau: f64,
    #[serde(default = "default_subsampling")]
    pub subsampling: Subsampling,
    pub rounds: usize,
    pub local: LocalWork,
    pub batch_size: usize,
    pub eta_l: f64,
    #[serde(default = "one")]
    pub eta_g: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    pub clip: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_averaging")]
    pub averaging: Averaging,
    #[serde(default)]
    pub flatten: FlattenOrder,
    /// Worker threads for client updates; results do not depend on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

fn default_subsampling() -> Subsampling {
    Subsampling::Uniform
}

fn default_averaging() -> Averaging {
    Averaging::Last
}

/// Exactly one of `epsilon`, `nu`, `z` unless `non_private` is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    /// Noise multiplier; `ν = z·L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    /// Defaults to `N^{−1.1}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default)]
    pub non_private: bool,
    #[serde(default = "default_grid")]
    pub grid: usize,
}

fn default_grid() -> usize {
    DEFAULT_LAMBDA_GRID
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
    #[serde(default)]
    pub spectrum_rounds: Vec<usize>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("fedls-out")
}

fn default_repeat() -> usize {
    1
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            repeat: default_repeat(),
            spectrum_rounds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub fed: FedSection,
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Flag values that replace config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub repeat: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub rounds: Option<usize>,
    pub sigma: Option<f64>,
    pub epsilon: Option<f64>,
    pub nu: Option<f64>,
    pub z: Option<f64>,
    pub data_dir: Option<PathBuf>,
}

/// How the run's noise level was obtained, and the guarantee it carries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoisePlan {
    pub nu: f64,
    pub source: &'static str,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub lambda_star: Option<f64>,
    pub alpha: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Pretty JSON with every default spelled out.
    pub fn canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if let Some(r) = o.repeat {
            self.output.repeat = r;
        }
        if let Some(s) = o.seed {
            self.fed.seed = s;
        }
        if let Some(t) = o.threads {
            self.fed.threads = Some(t);
        }
        if let Some(t) = o.rounds {
            self.fed.rounds = t;
        }
        if let Some(s) = o.sigma {
            self.fed.sigma = s;
        }
        let targets = [o.epsilon.is_some(), o.nu.is_some(), o.z.is_some()];
        match targets.iter().filter(|&&b| b).count() {
            0 => {}
            1 => {
                self.privacy.epsilon = o.epsilon;
                self.privacy.nu = o.nu;
                self.privacy.z = o.z;
                self.privacy.non_private = false;
            }
            _ => return Err(CliError::usage("give at most one of --eps, --nu, --z")),
        }
        if let Some(dir) = &o.data_dir {
            match &mut self.data.source {
                DataSource::Mnist { dir: d } => *d = Some(dir.clone()),
                _ => return Err(CliError::usage("--data-dir only applies to MNIST configs")),
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.privacy;
        let targets = [p.epsilon, p.nu, p.z].iter().filter(|x| x.is_some()).count();
        match (p.non_private, targets) {
            (true, 0) | (false, 1) => {}
            (true, _) => return Err(CliError::usage("non_private runs take no epsilon, nu or z")),
            (false, _) => {
                return Err(CliError::usage(
                    "privacy needs exactly one of epsilon, nu, z (or non_private: true)",
                ))
            }
        }
        for (name, v) in [("epsilon", p.epsilon), ("nu", p.nu), ("z", p.z)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(CliError::usage(format!("privacy.{name} must be positive")));
                }
            }
        }
        if let Some(d) = p.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(CliError::usage("privacy.delta must lie in (0, 1)"));
            }
        }
        if self.output.repeat == 0 {
            return Err(CliError::usage("output.repeat must be at least 1"));
        }
        if self.data.n_clients == 0 || self.data.per_client == 0 {
            return Err(CliError::usage("data.n_clients and data.per_client must be positive"));
        }
        if self.fed.threads == Some(0) {
            return Err(CliError::usage("fed.threads must be positive"));
        }
        // nu is a placeholder here; only the shape of the config is checked
        self.fed_config(self.fed.seed, if p.non_private { 0.0 } else { 1.0 })
            .validate()?;
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        self.privacy
            .delta
            .unwrap_or_else(|| default_delta(self.data.n_clients))
    }

    pub fn mechanism(&self) -> Result<Mechanism> {
        Ok(Mechanism::new(
            self.fed.subsampling,
            self.fed.tau,
            self.fed.clip,
            self.fed.rounds.max(1) as u64,
        )?)
    }

    /// Resolves the privacy section to a concrete `ν`.
    pub fn noise_plan(&self) -> Result<NoisePlan> {
        let p = &self.privacy;
        if p.non_private {
            return Ok(NoisePlan {
                nu: 0.0,
                source: "non_private",
                epsilon: None,
                delta: None,
                lambda_star: None,
                alpha: None,
            });
        }
        let mech = self.mechanism()?;
        let delta = self.delta();
        if let Some(eps) = p.epsilon {
            let c = calibrate_noise(&mech, eps, delta, p.grid)?;
            if !c.feasible {
                return Err(CliError::Infeasible(json!({
                    "reason": "no lambda on the grid satisfies the closed-form side conditions",
                    "epsilon": eps,
                    "delta": delta,
                    "nu_unconstrained": c.nu,
                })));
            }
            return Ok(NoisePlan {
                nu: c.nu,
                source: "epsilon",
                epsilon: Some(eps),
                delta: Some(delta),
                lambda_star: Some(c.lambda_star),
                alpha: Some(c.alpha),
            });
        }
        let (nu, source) = match (p.nu, p.z) {
            (Some(nu), _) => (nu, "nu"),
            (None, Some(z)) => (z * self.fed.clip, "z"),
            (None, None) => unreachable!("validated"),
        };
        let budget = budget_from_noise(&mech, nu, delta, p.grid)?;
        Ok(NoisePlan {
            nu,
            source,
            epsilon: budget.map(|b| b.epsilon),
            delta: Some(delta),
            lambda_star: budget.map(|b| b.lambda_star),
            alpha: budget.map(|b| b.alpha),
        })
    }

    /// Engine configuration for one repeat.
    pub fn fed_config(&self, seed: u64, nu: f64) -> FedConfig {
        let f = &self.fed;
        FedConfig {
            n_clients: self.data.n_clients,
            tau: f.tau,
            subsampling: f.subsampling,
            rounds: f.rounds,
            local: f.local,
            batch_size: f.batch_size,
            eta_l: f.eta_l,
            eta_g: f.eta_g,
            gamma: f.gamma,
            clip: f.clip,
            sigma: f.sigma,
            nu,
            weight_decay: f.weight_decay,
            seed,
            averaging: f.averaging,
            non_private: self.privacy.non_private,
            flatten: f.flatten,
            spectrum_rounds: self.output.spectrum_rounds.clone(),
        }
    }

    /// Seed of repeat `r`.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        self.fed.seed.wrapping_add(r as u64)
    }

    pub fn mnist_dir(&self) -> Result<PathBuf> {
        match &self.data.source {
            DataSource::Mnist { dir: Some(d) } => Ok(d.clone()),
            DataSource::Mnist { dir: None } => std::env::var_os(DATA_DIR_ENV)
                .map(|root| PathBuf::from(root).join("mnist"))
                .ok_or_else(|| {
                    CliError::usage(format!("MNIST directory not configured and {DATA_DIR_ENV} is unset"))
                }),
            _ => Err(CliError::usage("not an MNIST config")),
        }
    }
}
