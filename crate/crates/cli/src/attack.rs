//! `fedls attack`: loss-threshold membership inference against a saved model.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fedls::attack::{balanced_rows, per_sample_losses, roc_curve, threshold_auc, AttackSet, RocCurve};
use fedls::data::Dataset;
use fedls::fedsim::{participants, read_model};
use fedls::objectives::LogisticModel;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, Overrides};
use crate::error::{CliError, Result};
use crate::experiment::{build_partition, load_corpus, logistic_model, Corpus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttackReport {
    pub auc: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

#[derive(Debug, Clone, Default)]
pub struct AttackArgs {
    pub config: PathBuf,
    pub model: PathBuf,
    /// Which repeat produced the model; selects the partition seed.
    pub repeat: usize,
    /// Explicit row lists replace the config-derived split.
    pub members: Option<PathBuf>,
    pub non_members: Option<PathBuf>,
    pub flip: bool,
    pub roc: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

/// Members are the samples of every client selected during training, and
/// non-members the partition's hold-out rows, balanced to equal size.
pub fn config_rows(cfg: &ExperimentConfig, corpus: &Corpus, repeat: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let seed = cfg.repeat_seed(repeat);
    let part = build_partition(cfg, corpus, seed)?;
    // ν does not influence selection
    let fed = cfg.fed_config(seed, 1.0);
    Ok(balanced_rows(&part, &participants(&fed), seed)?)
}

pub fn attack_set(
    model: &LogisticModel,
    data: &Dataset,
    members: &[usize],
    non_members: &[usize],
    flip: bool,
) -> Result<AttackSet> {
    let (m, n) = if flip { (non_members, members) } else { (members, non_members) };
    let set = AttackSet::from_groups(&per_sample_losses(model, data, m)?, &per_sample_losses(model, data, n)?)?;
    Ok(set)
}

pub fn report(set: &AttackSet) -> AttackReport {
    AttackReport {
        auc: threshold_auc(set),
        n_members: set.n_members(),
        n_nonmembers: set.n_non_members(),
    }
}

/// Whitespace-separated row indices.
pub fn read_rows(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::usage(format!("{}: `{t}` is not a row index", path.display())))
        })
        .collect()
}

pub fn cmd_attack(args: &AttackArgs) -> Result<(AttackReport, RocCurve)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&Overrides {
        data_dir: args.data_dir.clone(),
        ..Overrides::default()
    })?;
    if matches!(cfg.data.source, DataSource::Quadratic { .. }) {
        return Err(CliError::usage("membership attacks need a classification dataset"));
    }
    let corpus = load_corpus(&cfg)?.expect("classification source");
    let path = &args.model;
    let w = read_model(BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?))?;
    let model = logistic_model(&corpus, w)?;
    let (members, non_members) = match (&args.members, &args.non_members) {
        (Some(m), Some(n)) => (read_rows(m)?, read_rows(n)?),
        (None, None) => config_rows(&cfg, &corpus, args.repeat)?,
        _ => return Err(CliError::usage("give both --members and --non-members, or neither")),
    };
    let set = attack_set(&model, &corpus.train, &members, &non_members, args.flip)?;
    let roc = roc_curve(&set);
    if let Some(out) = &args.roc {
        let mut w = BufWriter::new(File::create(out).map_err(|e| CliError::io(out, e))?);
        roc.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io(out, e))?;
    }
    Ok((report(&set), roc))
}
