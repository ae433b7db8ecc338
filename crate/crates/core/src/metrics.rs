//! Evaluation: worst-group and average accuracy, pseudo-attribute quality,
//! balanced accuracy and geometric-mean score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::GroupId;
use crate::error::{Result, SsaError, Warning};
use crate::pseudolabel::PseudoLabeled;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub correct: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub group: GroupId,
    #[serde(flatten)]
    pub stats: GroupStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub per_group: Vec<GroupEntry>,
    pub average_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub worst_group: GroupId,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<Warning>,
}

impl GroupReport {
    pub fn recall(&self, g: GroupId) -> Option<f64> {
        self.per_group.iter().find(|e| e.group == g).map(|e| e.stats.recall)
    }
}

/// Report over `(true_y, predicted_y, group)` triples.
pub fn group_report(predictions: &[(usize, usize, GroupId)]) -> Result<GroupReport> {
    group_report_over(predictions, &[])
}

/// As [`group_report`], warning about every group of `expected` that has no
/// samples (its recall is undefined and it is left out).
pub fn group_report_over(predictions: &[(usize, usize, GroupId)], expected: &[GroupId]) -> Result<GroupReport> {
    if predictions.is_empty() {
        return Err(SsaError::EmptyInput("predictions"));
    }
    let mut tally: BTreeMap<GroupId, (usize, usize)> = BTreeMap::new();
    for &(truth, pred, g) in predictions {
        let e = tally.entry(g).or_insert((0, 0));
        e.0 += 1;
        e.1 += usize::from(truth == pred);
    }
    let warnings = expected
        .iter()
        .filter(|g| !tally.contains_key(g))
        .map(|g| Warning::new("group_report", format!("group {g} has no samples; excluded")))
        .collect();
    let per_group: Vec<GroupEntry> = tally
        .into_iter()
        .map(|(group, (count, correct))| GroupEntry {
            group,
            stats: GroupStats {
                count,
                correct,
                recall: correct as f64 / count as f64,
            },
        })
        .collect();
    let worst = per_group
        .iter()
        .min_by(|a, b| a.stats.recall.total_cmp(&b.stats.recall))
        .expect("nonempty");
    let total: usize = per_group.iter().map(|e| e.stats.count).sum();
    let correct: usize = per_group.iter().map(|e| e.stats.correct).sum();
    Ok(GroupReport {
        worst_group_accuracy: worst.stats.recall,
        worst_group: worst.group,
        average_accuracy: correct as f64 / total as f64,
        per_group,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoGroupEntry {
    pub group: GroupId,
    /// Samples whose true group is this one.
    pub true_count: usize,
    /// Samples assigned to this pseudo-group.
    pub pseudo_count: usize,
    /// True members that kept their group.
    pub correct: usize,
    pub recall: f64,
    pub precision: Option<f64>,
    pub true_fraction: f64,
    pub pseudo_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoGroupReport {
    pub per_group: Vec<PseudoGroupEntry>,
    /// Smallest true group (first in group order on ties).
    pub minority_group: GroupId,
    pub minority_true_fraction: f64,
    pub minority_pseudo_fraction: f64,
    pub worst_group_recall: f64,
    pub attribute_accuracy: f64,
}

impl PseudoGroupReport {
    pub fn entry(&self, g: GroupId) -> Option<&PseudoGroupEntry> {
        self.per_group.iter().find(|e| e.group == g)
    }
}

/// Quality of the pseudo-attributes against the hidden ground truth
/// (`truth[sample_idx]`). Evaluation only.
pub fn pseudo_group_report(records: &[PseudoLabeled], truth: &[usize]) -> Result<PseudoGroupReport> {
    if records.is_empty() {
        return Err(SsaError::EmptyInput("pseudo-labeled records"));
    }
    let mut true_count: BTreeMap<GroupId, usize> = BTreeMap::new();
    let mut pseudo_count: BTreeMap<GroupId, usize> = BTreeMap::new();
    let mut correct: BTreeMap<GroupId, usize> = BTreeMap::new();
    for r in records {
        let a = *truth
            .get(r.sample_idx)
            .ok_or(SsaError::MissingAttribute(r.sample_idx))?;
        let tg = GroupId::new(r.y, a);
        *true_count.entry(tg).or_insert(0) += 1;
        *pseudo_count.entry(r.pseudo_group()).or_insert(0) += 1;
        if r.pseudo_attr == a {
            *correct.entry(tg).or_insert(0) += 1;
        }
    }
    let n = records.len() as f64;
    let mut groups: Vec<GroupId> = true_count.keys().chain(pseudo_count.keys()).copied().collect();
    groups.sort();
    groups.dedup();
    let per_group: Vec<PseudoGroupEntry> = groups
        .into_iter()
        .map(|g| {
            let t = true_count.get(&g).copied().unwrap_or(0);
            let p = pseudo_count.get(&g).copied().unwrap_or(0);
            let c = correct.get(&g).copied().unwrap_or(0);
            PseudoGroupEntry {
                group: g,
                true_count: t,
                pseudo_count: p,
                correct: c,
                recall: if t > 0 { c as f64 / t as f64 } else { f64::NAN },
                precision: (p > 0).then(|| c as f64 / p as f64),
                true_fraction: t as f64 / n,
                pseudo_fraction: p as f64 / n,
            }
        })
        .collect();
    let minority = per_group
        .iter()
        .filter(|e| e.true_count > 0)
        .min_by_key(|e| e.true_count)
        .expect("nonempty");
    let worst_group_recall = per_group
        .iter()
        .filter(|e| e.true_count > 0)
        .map(|e| e.recall)
        .fold(f64::INFINITY, f64::min);
    let total_correct: usize = correct.values().sum();
    Ok(PseudoGroupReport {
        minority_group: minority.group,
        minority_true_fraction: minority.true_fraction,
        minority_pseudo_fraction: minority.pseudo_fraction,
        worst_group_recall,
        attribute_accuracy: total_correct as f64 / n,
        per_group,
    })
}

/// Recall of each class `0..n_classes`; every class must occur in the truth.
pub fn class_recalls(predictions: &[(usize, usize)], n_classes: usize) -> Result<Vec<f64>> {
    let mut count = vec![0usize; n_classes];
    let mut correct = vec![0usize; n_classes];
    for &(t, p) in predictions {
        if t >= n_classes {
            return Err(SsaError::LabelOutOfRange {
                label: t,
                classes: n_classes,
            });
        }
        count[t] += 1;
        correct[t] += usize::from(t == p);
    }
    if let Some(k) = count.iter().position(|&c| c == 0) {
        return Err(SsaError::MissingClass(k));
    }
    Ok(count.iter().zip(&correct).map(|(&n, &c)| c as f64 / n as f64).collect())
}

/// Arithmetic mean of class-wise recall (bACC).
pub fn balanced_accuracy(predictions: &[(usize, usize)], n_classes: usize) -> Result<f64> {
    let r = class_recalls(predictions, n_classes)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Geometric mean of class-wise recall (GM); zero if any recall is zero.
pub fn geometric_mean_score(predictions: &[(usize, usize)], n_classes: usize) -> Result<f64> {
    Ok(geometric_mean(&class_recalls(predictions, n_classes)?))
}

pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    let n = values.len() as f64;
    let gm = values.iter().product::<f64>().powf(1.0 / n);
    // rounding can push equal recalls a hair above their mean
    gm.min(values.iter().sum::<f64>() / n)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
