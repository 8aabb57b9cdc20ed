//! `fedls accountant`: calibrate, budget and max-rounds queries.

use fedls::privacy::{budget_from_noise, calibrate_noise, default_delta, max_rounds, Mechanism, Subsampling};
use serde_json::{json, Value};

use crate::error::{CliError, Result};

/// Shared mechanism flags.
#[derive(Debug, Clone)]
pub struct MechanismArgs {
    pub mech: Subsampling,
    pub tau: f64,
    pub rounds: u64,
    pub clip: f64,
    pub grid: usize,
}

/// `δ` given directly or as `N^{−exp}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DeltaArgs {
    pub delta: Option<f64>,
    pub delta_exp: Option<f64>,
    pub n: Option<usize>,
}

impl DeltaArgs {
    pub fn resolve(&self) -> Result<f64> {
        let delta = match (self.delta, self.delta_exp, self.n) {
            (Some(d), None, _) => d,
            (Some(_), Some(_), _) => return Err(CliError::usage("give --delta or --delta-exp, not both")),
            (None, Some(e), Some(n)) => (n as f64).powf(-e),
            (None, None, Some(n)) => default_delta(n),
            (None, Some(_), None) => return Err(CliError::usage("--delta-exp needs --n")),
            (None, None, None) => return Err(CliError::usage("need --delta, or --n (with optional --delta-exp)")),
        };
        if !(delta > 0.0 && delta < 1.0) {
            return Err(CliError::usage(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(delta)
    }
}

/// A JSON record plus whether the query was feasible.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub record: Value,
    pub feasible: bool,
}

fn mechanism(m: &MechanismArgs) -> Result<Mechanism> {
    Ok(Mechanism::new(m.mech, m.tau, m.clip, m.rounds)?)
}

fn base_record(m: &MechanismArgs, delta: f64) -> Value {
    json!({
        "mechanism": m.mech.as_str(),
        "delta": delta,
        "tau": m.tau,
        "T": m.rounds,
        "clip": m.clip,
    })
}

/// Smallest `ν` reaching `(ε, δ)`.
pub fn calibrate(m: &MechanismArgs, epsilon: f64, delta: &DeltaArgs) -> Result<Answer> {
    let delta = delta.resolve()?;
    let c = calibrate_noise(&mechanism(m)?, epsilon, delta, m.grid)?;
    let mut record = base_record(m, delta);
    let obj = record.as_object_mut().expect("object");
    obj.insert("epsilon".into(), json!(epsilon));
    obj.insert("nu".into(), json!(c.nu));
    obj.insert("lambda_star".into(), json!(c.lambda_star));
    obj.insert("alpha".into(), json!(c.alpha));
    obj.insert("feasible".into(), json!(c.feasible));
    if !c.feasible {
        obj.insert(
            "reason".into(),
            json!("no lambda on the grid satisfies the closed-form side conditions"),
        );
    }
    Ok(Answer {
        record,
        feasible: c.feasible,
    })
}

/// Smallest `ε` that noise `ν` certifies.
pub fn budget(m: &MechanismArgs, nu: f64, delta: &DeltaArgs) -> Result<Answer> {
    let delta = delta.resolve()?;
    let b = budget_from_noise(&mechanism(m)?, nu, delta, m.grid)?;
    let mut record = base_record(m, delta);
    let obj = record.as_object_mut().expect("object");
    obj.insert("nu".into(), json!(nu));
    obj.insert("epsilon".into(), json!(b.map(|b| b.epsilon)));
    obj.insert("lambda_star".into(), json!(b.map(|b| b.lambda_star)));
    obj.insert("alpha".into(), json!(b.map(|b| b.alpha)));
    obj.insert("feasible".into(), json!(b.is_some()));
    if b.is_none() {
        obj.insert("reason".into(), json!("no epsilon in the search range is certified by this noise"));
    }
    Ok(Answer {
        record,
        feasible: b.is_some(),
    })
}

/// Largest `T` for uniform subsampling at multiplier `ν₁ = ν/L`.
pub fn rounds(nu1: f64, tau: f64, epsilon: f64, delta: &DeltaArgs, lambda: f64) -> Result<Answer> {
    let delta = delta.resolve()?;
    let r = max_rounds(nu1, tau, epsilon, delta, lambda)?;
    let record = json!({
        "mechanism": Subsampling::Uniform.as_str(),
        "nu1": nu1,
        "tau": tau,
        "epsilon": epsilon,
        "delta": delta,
        "lambda": lambda,
        "T": r.rounds,
        "bound": r.bound,
        "alpha": r.alpha,
        "feasible": r.feasible,
    });
    Ok(Answer {
        record,
        feasible: r.feasible,
    })
}
