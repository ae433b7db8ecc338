//! Phase 1: train the spurious-attribute predictor on labeled and unlabeled
//! data with group-wise adaptive confidence thresholds, then label every
//! unlabeled sample out-of-fold.
//!
//! The thresholds balance pseudo-group populations. The group `g_min` with
//! the fewest labeled training samples keeps the fixed threshold
//! `tau_g_min`; its labeled count plus its confident unlabeled count is the
//! budget `B`. Every other group gets the smallest threshold for which its
//! labeled count plus its admitted unlabeled count stays within `B`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datagen::{group_counts, DatasetBundle, GroupId, Sample};
use crate::error::{invalid, Result, SsaError, Warning};
use crate::model::{argmax, cross_entropy, Arch, Sgd, SgdConfig, SoftmaxClassifier, WeightedExample};
use crate::seed::{derive_seed, rng_for, stream};

/// Per-group confidence threshold. `Blocked` admits nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Value(f64),
    Blocked,
}

impl Threshold {
    pub fn admits(self, confidence: f64) -> bool {
        match self {
            Threshold::Value(t) => confidence >= t,
            Threshold::Blocked => false,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Threshold::Value(t) => Some(t),
            Threshold::Blocked => None,
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Value(t) => s.serialize_f64(*t),
            Threshold::Blocked => s.serialize_str("blocked"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(t) => Ok(Threshold::Value(t)),
            Raw::Tag(t) if t == "blocked" => Ok(Threshold::Blocked),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unknown threshold {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoPrediction {
    pub sample_idx: usize,
    pub pseudo_attr: usize,
    pub confidence: f64,
    pub pseudo_group: GroupId,
}

impl PseudoPrediction {
    /// Argmax attribute and its probability; ties go to the lower index.
    pub fn from_probs(sample_idx: usize, y: usize, probs: &[f64]) -> Self {
        let (pseudo_attr, confidence) = argmax(probs);
        Self {
            sample_idx,
            pseudo_attr,
            confidence,
            pseudo_group: GroupId::new(y, pseudo_attr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub tau: BTreeMap<GroupId, Threshold>,
    pub g_min: GroupId,
    pub tau_g_min: f64,
    pub budget: usize,
    /// `false` for the fixed-threshold ablation, where every group uses `tau_g_min`.
    pub adaptive: bool,
}

impl ThresholdTable {
    /// Threshold for `g`; groups missing from the table are blocked.
    pub fn threshold(&self, g: GroupId) -> Threshold {
        self.tau.get(&g).copied().unwrap_or(Threshold::Blocked)
    }

    pub fn admits(&self, pred: &PseudoPrediction) -> bool {
        self.threshold(pred.pseudo_group).admits(pred.confidence)
    }

    pub fn admitted_counts(&self, preds: &[PseudoPrediction]) -> BTreeMap<GroupId, usize> {
        let mut counts: BTreeMap<GroupId, usize> = self.tau.keys().map(|&g| (g, 0)).collect();
        for p in preds.iter().filter(|p| self.admits(p)) {
            *counts.entry(p.pseudo_group).or_insert(0) += 1;
        }
        counts
    }

    /// Groups whose labeled count plus admitted count exceeds the budget,
    /// ignoring blocked groups.
    pub fn balance_violations(
        &self,
        labeled_counts: &BTreeMap<GroupId, usize>,
        preds: &[PseudoPrediction],
    ) -> Vec<GroupId> {
        let admitted = self.admitted_counts(preds);
        self.tau
            .iter()
            .filter(|(_, t)| !matches!(t, Threshold::Blocked))
            .filter(|(g, _)| {
                labeled_counts.get(g).copied().unwrap_or(0) + admitted.get(g).copied().unwrap_or(0) > self.budget
            })
            .map(|(&g, _)| g)
            .collect()
    }

    /// Fixed-threshold table: every group uses `tau_g_min`. `g_min` and the
    /// budget are still filled in for reporting.
    pub fn fixed(
        labeled_counts: &BTreeMap<GroupId, usize>,
        preds: &[PseudoPrediction],
        tau_g_min: f64,
    ) -> Result<Self> {
        let mut table = compute_thresholds(labeled_counts, preds, tau_g_min)?;
        for t in table.tau.values_mut() {
            *t = Threshold::Value(tau_g_min);
        }
        table.adaptive = false;
        Ok(table)
    }
}

/// Group with the smallest count; ties go to the lexicographically first.
pub fn compute_g_min(labeled_counts: &BTreeMap<GroupId, usize>) -> Result<GroupId> {
    if labeled_counts.values().all(|&c| c == 0) {
        return Err(SsaError::EmptyInput("labeled group counts"));
    }
    // BTreeMap iterates in GroupId order and min_by_key keeps the first minimum
    Ok(*labeled_counts.iter().min_by_key(|(_, &c)| c).map(|(g, _)| g).unwrap())
}

/// Least threshold among the distinct confidences that admits at most
/// `allowed` of them (`sorted_desc` in descending order).
fn least_feasible_threshold(sorted_desc: &[f64], allowed: usize) -> Threshold {
    let n = sorted_desc.len();
    if n == 0 || allowed == 0 {
        return Threshold::Blocked;
    }
    if allowed >= n {
        return Threshold::Value(sorted_desc[n - 1]);
    }
    let t = sorted_desc[allowed - 1];
    if sorted_desc[allowed] < t {
        return Threshold::Value(t);
    }
    // ties at t would overshoot; step up to the next larger distinct value
    sorted_desc[..allowed - 1]
        .iter()
        .rev()
        .find(|&&c| c > t)
        .map_or(Threshold::Blocked, |&c| Threshold::Value(c))
}

pub fn compute_thresholds(
    labeled_counts: &BTreeMap<GroupId, usize>,
    preds: &[PseudoPrediction],
    tau_g_min: f64,
) -> Result<ThresholdTable> {
    if !(tau_g_min > 0.0 && tau_g_min <= 1.0) {
        return Err(invalid(format!("tau_g_min = {tau_g_min} outside (0, 1]")));
    }
    let g_min = compute_g_min(labeled_counts)?;

    let mut confidences: BTreeMap<GroupId, Vec<f64>> = labeled_counts.keys().map(|&g| (g, Vec::new())).collect();
    for p in preds {
        confidences.entry(p.pseudo_group).or_default().push(p.confidence);
    }

    let admitted_min = confidences[&g_min].iter().filter(|&&c| c >= tau_g_min).count();
    let budget = labeled_counts[&g_min] + admitted_min;

    let mut tau = BTreeMap::new();
    for (g, mut confs) in confidences {
        if g == g_min {
            tau.insert(g, Threshold::Value(tau_g_min));
            continue;
        }
        let allowed = budget.saturating_sub(labeled_counts.get(&g).copied().unwrap_or(0));
        confs.sort_unstable_by(|a, b| b.total_cmp(a));
        tau.insert(g, least_feasible_threshold(&confs, allowed));
    }

    Ok(ThresholdTable {
        tau,
        g_min,
        tau_g_min,
        budget,
        adaptive: true,
    })
}

/// Predictions for `unlabeled[i]`, `i` in `indices`.
pub fn predict_unlabeled(
    model: &SoftmaxClassifier,
    unlabeled: &[Sample],
    indices: &[usize],
) -> Result<Vec<PseudoPrediction>> {
    let mut scratch = Vec::new();
    let mut probs = Vec::new();
    indices
        .iter()
        .map(|&i| {
            let s = &unlabeled[i];
            model.forward_with(&s.x, &mut scratch, &mut probs)?;
            Ok(PseudoPrediction::from_probs(i, s.y, &probs))
        })
        .collect()
}

/// Mean loss over a batch; `n == 0` flags an empty batch (value 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub n: usize,
}

impl BatchLoss {
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Mean cross-entropy against the ground-truth attribute.
pub fn sup_loss(model: &SoftmaxClassifier, batch: &[&Sample]) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Ok(BatchLoss { value: 0.0, n: 0 });
    }
    let mut total = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let a = s.a.ok_or(SsaError::MissingAttribute(i))?;
        total += cross_entropy(&model.forward(&s.x)?, a)?;
    }
    Ok(BatchLoss {
        value: total / batch.len() as f64,
        n: batch.len(),
    })
}

/// Batch mean of `1{conf >= tau[(y, a_hat)]} * CE(p, a_hat)`.
pub fn unsup_loss(model: &SoftmaxClassifier, batch: &[&Sample], table: &ThresholdTable) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let probs = model.forward(&s.x)?;
        let pred = PseudoPrediction::from_probs(i, s.y, &probs);
        if table.admits(&pred) {
            total += cross_entropy(&probs, pred.pseudo_attr)?;
        }
    }
    Ok(total / batch.len() as f64)
}

pub fn total_loss(
    model: &SoftmaxClassifier,
    labeled_batch: &[&Sample],
    unlabeled_batch: &[&Sample],
    table: &ThresholdTable,
) -> Result<f64> {
    Ok(sup_loss(model, labeled_batch)?.value + unsup_loss(model, unlabeled_batch, table)?)
}

/// Where threshold recomputation gets its predictions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    /// Predictions over the whole unlabeled training split, labeled counts
    /// over the whole labeled training split.
    #[default]
    FullSet,
    /// Only the current labeled and unlabeled mini-batches.
    MiniBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelConfig {
    pub tau_g_min: f64,
    pub recompute_every: usize,
    pub max_iters: usize,
    pub adaptive: bool,
    pub scope: ThresholdScope,
    pub arch: Arch,
    pub sgd: SgdConfig,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            tau_g_min: 0.95,
            recompute_every: 1,
            max_iters: 600,
            adaptive: true,
            scope: ThresholdScope::FullSet,
            arch: Arch::Linear,
            sgd: SgdConfig::default(),
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_g_min > 0.0 && self.tau_g_min <= 1.0) {
            return Err(invalid(format!("tau_g_min = {} outside (0, 1]", self.tau_g_min)));
        }
        if self.recompute_every == 0 {
            return Err(invalid("recompute_every must be at least 1"));
        }
        self.sgd.validate()
    }
}

/// Cycles through a shuffled index order, reshuffling every pass.
#[derive(Debug, Clone)]
pub struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCycler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::BATCHES);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    /// Next `size` indices (fewer only if the set itself is smaller).
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        let take = size.min(n);
        let mut out = Vec::with_capacity(take);
        while out.len() < take {
            if self.pos == n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrace {
    pub group: GroupId,
    pub labeled: usize,
    pub tau: Threshold,
    /// Admitted over the full unlabeled training split.
    pub admitted: usize,
    /// Admitted within the unlabeled mini-batch of this iteration.
    pub batch_admitted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub g_min: GroupId,
    pub budget: usize,
    pub adaptive: bool,
    pub groups: Vec<GroupTrace>,
    pub holdout_worst_group_accuracy: Option<f64>,
    pub balance_violations: usize,
}

impl TraceRecord {
    pub fn admitted(&self, g: GroupId) -> usize {
        self.groups.iter().find(|t| t.group == g).map_or(0, |t| t.admitted)
    }

    pub fn total_admitted(&self) -> usize {
        self.groups.iter().map(|t| t.admitted).sum()
    }
}

#[derive(Debug, Clone)]
pub struct AttrTrainOutput {
    pub model: SoftmaxClassifier,
    pub trace: Vec<TraceRecord>,
    /// Iteration count of the selected checkpoint.
    pub selected_iteration: usize,
    pub selected_holdout_wga: Option<f64>,
    pub warnings: Vec<Warning>,
}

/// Worst-group and average accuracy of attribute prediction; groups absent
/// from `samples` are skipped. `None` when `samples` is empty.
pub fn attribute_accuracy(model: &SoftmaxClassifier, samples: &[Sample]) -> Result<Option<(f64, f64)>> {
    let mut per_group: BTreeMap<GroupId, (usize, usize)> = BTreeMap::new();
    let mut scratch = Vec::new();
    let mut probs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let a = s.a.ok_or(SsaError::MissingAttribute(i))?;
        model.forward_with(&s.x, &mut scratch, &mut probs)?;
        let entry = per_group.entry(GroupId::new(s.y, a)).or_insert((0, 0));
        entry.0 += 1;
        entry.1 += usize::from(argmax(&probs).0 == a);
    }
    if per_group.is_empty() {
        return Ok(None);
    }
    let worst = per_group
        .values()
        .map(|&(n, c)| c as f64 / n as f64)
        .fold(f64::INFINITY, f64::min);
    let (n, c) = per_group.values().fold((0, 0), |acc, &(n, c)| (acc.0 + n, acc.1 + c));
    Ok(Some((worst, c as f64 / n as f64)))
}

/// Trains one attribute predictor.
///
/// `unlabeled_train` must not carry attributes. Each iteration draws one
/// labeled and one unlabeled mini-batch, recomputes the threshold table
/// every `recompute_every` iterations, and takes one SGD step on the sum of
/// the supervised and thresholded unsupervised batch means. The returned
/// model is the checkpoint with the best holdout worst-group attribute
/// accuracy (ties broken by average accuracy, later checkpoints winning).
#[allow(clippy::too_many_arguments)]
pub fn train_attr_predictor(
    labeled_train: &[Sample],
    unlabeled_train: &[Sample],
    holdout: &[Sample],
    n_classes: usize,
    n_attrs: usize,
    cfg: &PseudoLabelConfig,
    seed: u64,
) -> Result<AttrTrainOutput> {
    cfg.validate()?;
    if labeled_train.is_empty() {
        return Err(SsaError::EmptyInput("labeled training split"));
    }
    if let Some(i) = unlabeled_train.iter().position(|s| s.a.is_some()) {
        return Err(invalid(format!(
            "unlabeled training sample {i} carries an attribute; pass the stripped view"
        )));
    }
    let dim = labeled_train[0].x.len();
    let mut model = SoftmaxClassifier::new(cfg.arch, dim, n_attrs, derive_seed(seed, stream::INIT))?;
    let mut warnings = Vec::new();

    let grid = GroupId::grid(n_classes, n_attrs);
    let mut full_counts: BTreeMap<GroupId, usize> = grid.iter().map(|&g| (g, 0)).collect();
    full_counts.extend(group_counts(labeled_train));
    let holdout_groups = group_counts(holdout);
    for g in &grid {
        if full_counts[g] > 0 && !holdout_groups.contains_key(g) {
            warnings.push(Warning::new(
                "train_attr_predictor",
                format!("holdout lacks group {g}; excluded from model selection"),
            ));
        }
    }
    if holdout.is_empty() {
        warnings.push(Warning::new(
            "train_attr_predictor",
            "empty holdout; the final iterate is returned",
        ));
    }

    let mut best: Option<(f64, f64, usize, Vec<f64>)> = None;
    let consider = |model: &SoftmaxClassifier,
                    iteration: usize,
                    best: &mut Option<(f64, f64, usize, Vec<f64>)>|
     -> Result<Option<f64>> {
        let Some((worst, avg)) = attribute_accuracy(model, holdout)? else {
            return Ok(None);
        };
        let better = match best {
            None => true,
            Some((bw, ba, _, _)) => worst > *bw || (worst == *bw && avg >= *ba),
        };
        if better {
            *best = Some((worst, avg, iteration, model.params.clone()));
        }
        Ok(Some(worst))
    };

    let mut opt = Sgd::new(cfg.sgd, model.n_params());
    let mut lab_cycler = BatchCycler::new(labeled_train.len(), derive_seed(seed, 1));
    let mut unl_cycler = BatchCycler::new(unlabeled_train.len(), derive_seed(seed, 2));
    let all_unlabeled: Vec<usize> = (0..unlabeled_train.len()).collect();
    let mut trace = Vec::new();
    let mut table: Option<ThresholdTable> = None;
    let mut grad = vec![0.0; model.n_params()];
    let mut scratch = Vec::new();
    let mut probs = Vec::new();

    for t in 0..cfg.max_iters {
        let lb = lab_cycler.next_batch(cfg.sgd.batch_size);
        let ub = unl_cycler.next_batch(cfg.sgd.batch_size);
        let batch_preds: Vec<PseudoPrediction> = ub
            .iter()
            .map(|&i| {
                model.forward_with(&unlabeled_train[i].x, &mut scratch, &mut probs)?;
                Ok(PseudoPrediction::from_probs(i, unlabeled_train[i].y, &probs))
            })
            .collect::<Result<_>>()?;

        if t % cfg.recompute_every == 0 || table.is_none() {
            let (counts, preds) = match cfg.scope {
                ThresholdScope::FullSet => (
                    full_counts.clone(),
                    predict_unlabeled(&model, unlabeled_train, &all_unlabeled)?,
                ),
                ThresholdScope::MiniBatch => {
                    let mut c: BTreeMap<GroupId, usize> = grid.iter().map(|&g| (g, 0)).collect();
                    c.extend(group_counts(lb.iter().map(|&i| &labeled_train[i])));
                    (c, batch_preds.clone())
                }
            };
            let new_table = if counts.values().all(|&c| c == 0) {
                // mini-batch without labeled members cannot anchor g_min
                table.clone().ok_or(SsaError::EmptyInput("labeled mini-batch"))?
            } else if cfg.adaptive {
                compute_thresholds(&counts, &preds, cfg.tau_g_min)?
            } else {
                ThresholdTable::fixed(&counts, &preds, cfg.tau_g_min)?
            };
            let violations = if new_table.adaptive {
                new_table.balance_violations(&counts, &preds).len()
            } else {
                0
            };
            let admitted = new_table.admitted_counts(&preds);
            let batch_admitted = new_table.admitted_counts(&batch_preds);
            let holdout_wga = consider(&model, t, &mut best)?;
            trace.push(TraceRecord {
                iteration: t,
                g_min: new_table.g_min,
                budget: new_table.budget,
                adaptive: new_table.adaptive,
                groups: new_table
                    .tau
                    .iter()
                    .map(|(&g, &tau)| GroupTrace {
                        group: g,
                        labeled: counts.get(&g).copied().unwrap_or(0),
                        tau,
                        admitted: admitted.get(&g).copied().unwrap_or(0),
                        batch_admitted: batch_admitted.get(&g).copied().unwrap_or(0),
                    })
                    .collect(),
                holdout_worst_group_accuracy: holdout_wga,
                balance_violations: violations,
            });
            table = Some(new_table);
        }
        let table_ref = table.as_ref().expect("set above");

        grad.iter_mut().for_each(|g| *g = 0.0);
        let lw = 1.0 / lb.len() as f64;
        let mut examples: Vec<WeightedExample> = lb
            .iter()
            .map(|&i| {
                let s = &labeled_train[i];
                let a = s.a.ok_or(SsaError::MissingAttribute(i))?;
                Ok(WeightedExample::new(&s.x, a, lw))
            })
            .collect::<Result<_>>()?;
        if !ub.is_empty() {
            let uw = 1.0 / ub.len() as f64;
            examples.extend(
                batch_preds
                    .iter()
                    .filter(|p| table_ref.admits(p))
                    .map(|p| WeightedExample::new(&unlabeled_train[p.sample_idx].x, p.pseudo_attr, uw)),
            );
        }
        model.accumulate_weighted_grad(&examples, &mut grad)?;
        opt.step(&mut model, &grad);
    }

    if cfg.max_iters > 0 {
        consider(&model, cfg.max_iters, &mut best)?;
    }
    let (selected_iteration, selected_holdout_wga) = match best {
        Some((worst, _, it, params)) if cfg.max_iters > 0 => {
            model.params = params;
            (it, Some(worst))
        }
        _ => (cfg.max_iters, None),
    };

    Ok(AttrTrainOutput {
        model,
        trace,
        selected_iteration,
        selected_holdout_wga,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeled {
    pub sample_idx: usize,
    pub x: Vec<f64>,
    pub y: usize,
    pub pseudo_attr: usize,
    pub confidence: f64,
    /// Fold whose held-out model produced the label.
    pub fold: usize,
}

impl PseudoLabeled {
    pub fn pseudo_group(&self) -> GroupId {
        GroupId::new(self.y, self.pseudo_attr)
    }
}

/// Labels every unlabeled sample with the model trained with its fold held
/// out. No confidence filtering.
pub fn finalize_labels(models: &[SoftmaxClassifier], bundle: &DatasetBundle) -> Result<Vec<PseudoLabeled>> {
    if models.len() != bundle.unlabeled_folds.len() {
        return Err(SsaError::FoldMismatch {
            models: models.len(),
            folds: bundle.unlabeled_folds.len(),
        });
    }
    let mut out = Vec::with_capacity(bundle.unlabeled.len());
    for (fold, (model, indices)) in models.iter().zip(&bundle.unlabeled_folds).enumerate() {
        for p in predict_unlabeled(model, &bundle.unlabeled, indices)? {
            let s = &bundle.unlabeled[p.sample_idx];
            out.push(PseudoLabeled {
                sample_idx: p.sample_idx,
                x: s.x.clone(),
                y: s.y,
                pseudo_attr: p.pseudo_attr,
                confidence: p.confidence,
                fold,
            });
        }
    }
    out.sort_by_key(|r| r.sample_idx);
    Ok(out)
}
