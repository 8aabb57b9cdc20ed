//! Loss-threshold membership inference and its ROC AUC.
//!
//! A sample is flagged as a training member when its loss falls below a
//! threshold, so the attack score is `−loss`.

use rand::seq::index;
use serde::Serialize;

use crate::data::{Dataset, Partition};
use crate::error::{check_len, Error, Result};
use crate::objectives::LogisticModel;
use crate::rng::{substream, ATTACK_STREAM};

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSet {
    losses: Vec<f64>,
    membership: Vec<bool>,
}

impl AttackSet {
    pub fn new(losses: Vec<f64>, membership: Vec<bool>) -> Result<Self> {
        check_len(losses.len(), membership.len())?;
        if !membership.iter().any(|&m| m) || membership.iter().all(|&m| m) {
            return Err(Error::invalid("attack set needs both members and non-members"));
        }
        if losses.iter().any(|l| l.is_nan()) {
            return Err(Error::invalid("NaN loss in attack set"));
        }
        Ok(Self { losses, membership })
    }

    /// Members first, then non-members.
    pub fn from_groups(members: &[f64], non_members: &[f64]) -> Result<Self> {
        let losses = members.iter().chain(non_members).copied().collect();
        let membership = std::iter::repeat_n(true, members.len())
            .chain(std::iter::repeat_n(false, non_members.len()))
            .collect();
        Self::new(losses, membership)
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn membership(&self) -> &[bool] {
        &self.membership
    }

    pub fn n_members(&self) -> usize {
        self.membership.iter().filter(|&&m| m).count()
    }

    pub fn n_non_members(&self) -> usize {
        self.membership.len() - self.n_members()
    }

    pub fn flipped(&self) -> Self {
        Self {
            losses: self.losses.clone(),
            membership: self.membership.iter().map(|m| !m).collect(),
        }
    }
}

/// Unreduced cross-entropy of each selected row.
pub fn per_sample_losses(model: &LogisticModel, data: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    check_len(model.features, data.n_features)?;
    rows.iter()
        .map(|&i| {
            if i >= data.len() {
                return Err(Error::invalid(format!("row {i} out of range")));
            }
            let label = data.labels[i];
            if label >= model.classes {
                return Err(Error::invalid(format!("label {label} out of range")));
            }
            Ok(model.sample_loss(data.row(i), label))
        })
        .collect()
}

/// Mann–Whitney AUC of score `−loss` for the member class; ties count ½.
pub fn threshold_auc(set: &AttackSet) -> f64 {
    let mut order: Vec<usize> = (0..set.losses.len()).collect();
    // descending loss is ascending score
    order.sort_by(|&a, &b| set.losses[b].total_cmp(&set.losses[a]));
    let (mut rank_sum, mut i) = (0.0, 0);
    while i < order.len() {
        let mut j = i;
        while j < order.len() && set.losses[order[j]] == set.losses[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| set.membership[k]).count() as f64;
        i = j;
    }
    let (m, n) = (set.n_members() as f64, set.n_non_members() as f64);
    (rank_sum - m * (m + 1.0) / 2.0) / (m * n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.fpr
            .windows(2)
            .zip(self.tpr.windows(2))
            .map(|(f, t)| (f[1] - f[0]) * (t[0] + t[1]) / 2.0)
            .sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "fpr,tpr")?;
        for (f, t) in self.fpr.iter().zip(&self.tpr) {
            writeln!(w, "{f},{t}")?;
        }
        Ok(())
    }
}

/// ROC obtained by sweeping the threshold over every distinct loss.
pub fn roc_curve(set: &AttackSet) -> RocCurve {
    let mut order: Vec<usize> = (0..set.losses.len()).collect();
    order.sort_by(|&a, &b| set.losses[a].total_cmp(&set.losses[b]));
    let (m, n) = (set.n_members() as f64, set.n_non_members() as f64);
    let mut curve = RocCurve {
        fpr: vec![0.0],
        tpr: vec![0.0],
    };
    let (mut tp, mut fp, mut i) = (0usize, 0usize, 0);
    while i < order.len() {
        let t = set.losses[order[i]];
        while i < order.len() && set.losses[order[i]] == t {
            if set.membership[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.fpr.push(fp as f64 / n);
        curve.tpr.push(tp as f64 / m);
    }
    curve
}

/// Equal-size member and non-member rows: members come from the shards of
/// `participants`, non-members from the partition's holdout. The larger
/// side is subsampled without replacement; both lists come back ascending.
pub fn balanced_rows(partition: &Partition, participants: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut members = Vec::new();
    for &j in participants {
        let shard = partition
            .shards
            .get(j)
            .ok_or_else(|| Error::invalid(format!("client {j} is not in the partition")))?;
        members.extend_from_slice(&shard.indices);
    }
    let non_members = partition.holdout.clone();
    let n = members.len().min(non_members.len());
    if n == 0 {
        return Err(Error::invalid("membership attack needs members and hold-out rows"));
    }
    let mut rng = substream(seed, 0, ATTACK_STREAM);
    let mut pick = |rows: Vec<usize>| {
        let mut out: Vec<usize> = if rows.len() == n {
            rows
        } else {
            index::sample(&mut rng, rows.len(), n).into_iter().map(|i| rows[i]).collect()
        };
        out.sort_unstable();
        out
    };
    let members = pick(members);
    let non_members = pick(non_members);
    Ok((members, non_members))
}
