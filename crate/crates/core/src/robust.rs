//! Phase 2: worst-group robust training on the pseudo-labeled set.
//!
//! Group DRO keeps adversarial weights `q` on the simplex over groups. Each
//! step computes per-group mean losses on the mini-batch, applies the
//! exponentiated-gradient update `q_g <- q_g * exp(eta_q * loss_g)`,
//! renormalizes, then takes one SGD step on `sum_g q_g * loss_g`.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{GroupId, Sample};
use crate::error::{invalid, Result, SsaError, Warning};
use crate::metrics::{group_report_over, GroupEntry, GroupReport};
use crate::model::{cross_entropy, Arch, Sgd, SgdConfig, SoftmaxClassifier, WeightedExample};
use crate::pseudolabel::BatchCycler;
use crate::seed::{derive_seed, rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobustMethod {
    #[default]
    Dro,
    Contrastive,
    Erm,
}

/// How a group absent from a mini-batch enters the `q` update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingGroupPolicy {
    /// Loss taken as zero for that step.
    #[default]
    Zero,
    /// Last observed loss of the group is reused.
    CarryPrevious,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DroConfig {
    pub eta_q: f64,
    pub missing_groups: MissingGroupPolicy,
}

impl Default for DroConfig {
    fn default() -> Self {
        Self {
            eta_q: 0.01,
            missing_groups: MissingGroupPolicy::Zero,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Samples drawn per group for positives and negatives.
    pub m: usize,
    pub temperature: f64,
    pub contrastive_weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            m: 16,
            temperature: 0.1,
            contrastive_weight: 0.75,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(invalid("contrastive m must be at least 2"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.contrastive_weight) {
            return Err(invalid("contrastive_weight must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    pub epochs: usize,
    pub arch: Arch,
    pub sgd: SgdConfig,
    pub dro: DroConfig,
    pub contrastive: ContrastiveConfig,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            arch: Arch::Linear,
            sgd: SgdConfig {
                learning_rate: 0.01,
                batch_size: 256,
                ..SgdConfig::default()
            },
            dro: DroConfig::default(),
            contrastive: ContrastiveConfig::default(),
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dro.eta_q >= 0.0) {
            return Err(invalid("eta_q must be nonnegative"));
        }
        self.contrastive.validate()?;
        self.sgd.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroState {
    pub q: Vec<f64>,
    pub eta_q: f64,
    pub group_index: BTreeMap<GroupId, usize>,
    pub policy: MissingGroupPolicy,
    last_losses: Vec<f64>,
}

impl DroState {
    /// Uniform weights over `groups`.
    pub fn new(groups: &[GroupId], cfg: DroConfig) -> Result<Self> {
        if groups.is_empty() {
            return Err(SsaError::EmptyInput("group list"));
        }
        let group_index: BTreeMap<GroupId, usize> = groups.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        if group_index.len() != groups.len() {
            return Err(invalid("duplicate group in DRO group list"));
        }
        let k = groups.len();
        Ok(Self {
            q: vec![1.0 / k as f64; k],
            eta_q: cfg.eta_q,
            group_index,
            policy: cfg.missing_groups,
            last_losses: vec![0.0; k],
        })
    }

    pub fn weight(&self, g: GroupId) -> Option<f64> {
        self.group_index.get(&g).map(|&i| self.q[i])
    }

    /// Exponentiated-gradient step on `q`. `losses[i]` is `None` for groups
    /// absent from the batch.
    pub fn update(&mut self, losses: &[Option<f64>]) {
        for (i, l) in losses.iter().enumerate() {
            let loss = match (l, self.policy) {
                (Some(v), _) => {
                    self.last_losses[i] = *v;
                    *v
                }
                (None, MissingGroupPolicy::Zero) => 0.0,
                (None, MissingGroupPolicy::CarryPrevious) => self.last_losses[i],
            };
            self.q[i] *= (self.eta_q * loss).exp();
        }
        let sum: f64 = self.q.iter().sum();
        self.q.iter_mut().for_each(|v| *v /= sum);
    }
}

/// One training example for the robust phase.
#[derive(Debug, Clone, Copy)]
pub struct RobustExample<'a> {
    pub x: &'a [f64],
    pub y: usize,
    pub group: GroupId,
}

/// Per-group mean loss on `batch` (None for absent groups), then the `q`
/// update, then one SGD step on the `q`-weighted loss. Returns the losses.
pub fn group_dro_step(
    model: &mut SoftmaxClassifier,
    dro: &mut DroState,
    batch: &[RobustExample<'_>],
    opt: &mut Sgd,
) -> Result<Vec<Option<f64>>> {
    let k = dro.q.len();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    let mut slots = Vec::with_capacity(batch.len());
    for ex in batch {
        let &slot = dro
            .group_index
            .get(&ex.group)
            .ok_or_else(|| invalid(format!("group {} not tracked by DRO state", ex.group)))?;
        sums[slot] += cross_entropy(&model.forward(ex.x)?, ex.y)?;
        counts[slot] += 1;
        slots.push(slot);
    }
    let losses: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    dro.update(&losses);

    let examples: Vec<WeightedExample> = batch
        .iter()
        .zip(&slots)
        .map(|(ex, &slot)| WeightedExample::new(ex.x, ex.y, dro.q[slot] / counts[slot] as f64))
        .collect();
    let mut grad = vec![0.0; model.n_params()];
    model.accumulate_weighted_grad(&examples, &mut grad)?;
    opt.step(model, &grad);
    Ok(losses)
}

/// One SGD step on the unweighted batch-mean cross-entropy.
pub fn erm_step(model: &mut SoftmaxClassifier, batch: &[RobustExample<'_>], opt: &mut Sgd) -> Result<()> {
    if batch.is_empty() {
        return Err(SsaError::EmptyInput("ERM batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let examples: Vec<WeightedExample> = batch.iter().map(|ex| WeightedExample::new(ex.x, ex.y, w)).collect();
    let mut grad = vec![0.0; model.n_params()];
    model.accumulate_weighted_grad(&examples, &mut grad)?;
    opt.step(model, &grad);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveBatch {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Some contributing group had fewer than `m` members and was drawn with replacement.
    pub with_replacement: bool,
}

fn draw(members: &[usize], m: usize, rng: &mut impl Rng, out: &mut Vec<usize>) -> bool {
    if members.len() >= m {
        out.extend(index::sample(rng, members.len(), m).into_iter().map(|i| members[i]));
        false
    } else {
        out.extend((0..m).map(|_| members[rng.random_range(0..members.len())]));
        true
    }
}

/// Positives from groups `(y, a')` with `a' != a`, negatives from groups
/// `(y', a)` with `y' != y`, `m` per group. `None` when either side has no
/// eligible group.
pub fn sample_contrastive_batch(
    anchor: GroupId,
    by_group: &BTreeMap<GroupId, Vec<usize>>,
    m: usize,
    rng: &mut impl Rng,
) -> Option<ContrastiveBatch> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut with_replacement = false;
    for (g, members) in by_group {
        if members.is_empty() {
            continue;
        }
        if g.y == anchor.y && g.a != anchor.a {
            with_replacement |= draw(members, m, rng, &mut positives);
        } else if g.y != anchor.y && g.a == anchor.a {
            with_replacement |= draw(members, m, rng, &mut negatives);
        }
    }
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    Some(ContrastiveBatch {
        positives,
        negatives,
        with_replacement,
    })
}

fn normalized(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    (v.iter().map(|x| x / norm).collect(), norm)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Supervised contrastive loss of one anchor on L2-normalized vectors:
/// `mean_{p in P} -log( exp(z.p/t) / sum_{j in P u N} exp(z.j/t) )`.
pub fn contrastive_loss(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], temperature: f64) -> f64 {
    contrastive_loss_grad(anchor, positives, negatives, temperature).loss
}

#[derive(Debug, Clone)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positives: Vec<Vec<f64>>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// Loss and its gradients with respect to the raw (unnormalized) vectors.
pub fn contrastive_loss_grad(
    anchor: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> ContrastiveGrad {
    assert!(!positives.is_empty() && !negatives.is_empty(), "empty contrastive sets");
    let (u, u_norm) = normalized(anchor);
    let others: Vec<(Vec<f64>, f64)> = positives.iter().chain(negatives).map(|v| normalized(v)).collect();
    let n_pos = positives.len();
    let logits: Vec<f64> = others.iter().map(|(v, _)| dot(&u, v) / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|s| (s - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let loss = logits[..n_pos].iter().map(|s| lse - s).sum::<f64>() / n_pos as f64;

    // dL/ds_j = softmax_j - 1{j in P}/|P|
    let ds: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, s)| (s - lse).exp() - if j < n_pos { 1.0 / n_pos as f64 } else { 0.0 })
        .collect();

    // back through u.v/t and through v = z/|z|
    let unnormalize = |g: Vec<f64>, unit: &[f64], norm: f64| -> Vec<f64> {
        let gu = dot(&g, unit);
        g.iter().zip(unit).map(|(gi, ui)| (gi - gu * ui) / norm).collect()
    };
    let mut du = vec![0.0; u.len()];
    let mut d_others = Vec::with_capacity(others.len());
    for ((v, norm), &d) in others.iter().zip(&ds) {
        for (acc, vi) in du.iter_mut().zip(v) {
            *acc += d * vi / temperature;
        }
        let dv: Vec<f64> = u.iter().map(|ui| d * ui / temperature).collect();
        d_others.push(unnormalize(dv, v, *norm));
    }
    let d_negatives = d_others.split_off(n_pos);
    ContrastiveGrad {
        loss,
        d_anchor: unnormalize(du, &u, u_norm),
        d_positives: d_others,
        d_negatives,
    }
}

/// Contrastive loss of one anchor on the model's representations. Adds
/// `scale` times its parameter gradient into `grad` and returns the loss.
pub fn accumulate_contrastive_grad(
    model: &SoftmaxClassifier,
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    temperature: f64,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(SsaError::EmptyInput("contrastive positives or negatives"));
    }
    let reps = |xs: &[&[f64]]| -> Result<Vec<Vec<f64>>> { xs.iter().map(|x| model.representation(x)).collect() };
    let z = model.representation(anchor)?;
    let g = contrastive_loss_grad(&z, &reps(positives)?, &reps(negatives)?, temperature);
    let scaled = |v: &[f64]| v.iter().map(|d| d * scale).collect::<Vec<_>>();
    model.accumulate_representation_grad(anchor, &scaled(&g.d_anchor), grad)?;
    for (x, d) in positives
        .iter()
        .zip(&g.d_positives)
        .chain(negatives.iter().zip(&g.d_negatives))
    {
        model.accumulate_representation_grad(x, &scaled(d), grad)?;
    }
    Ok(g.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub average_accuracy: f64,
    pub per_group: Vec<GroupEntry>,
    pub worst_group_accuracy: f64,
    pub q: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RobustOutput {
    pub model: SoftmaxClassifier,
    pub log: Vec<EpochLog>,
    pub selected_epoch: usize,
    pub dro: Option<DroState>,
    pub skipped_anchors: usize,
    pub warnings: Vec<Warning>,
}

/// Group report of `model` predicting `y` on samples with known groups.
pub fn evaluate_model(model: &SoftmaxClassifier, samples: &[Sample], expected: &[GroupId]) -> Result<GroupReport> {
    let preds = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let g = s.group().ok_or(SsaError::MissingAttribute(i))?;
            Ok((s.y, model.predict(&s.x)?, g))
        })
        .collect::<Result<Vec<_>>>()?;
    group_report_over(&preds, expected)
}

/// Trains a target classifier on `train` with the chosen method, evaluating
/// on `validation` (true groups) after every epoch and returning the epoch
/// with the best worst-group accuracy (ties: better average accuracy, then
/// the later epoch). Epoch 0, the initial model, is logged but selected
/// only when no epochs are configured.
pub fn train_robust(
    train: &[RobustExample<'_>],
    validation: &[Sample],
    n_classes: usize,
    groups: &[GroupId],
    method: RobustMethod,
    cfg: &RobustConfig,
    seed: u64,
) -> Result<RobustOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SsaError::EmptyInput("robust training set"));
    }
    let dim = train[0].x.len();
    let mut model = SoftmaxClassifier::new(cfg.arch, dim, n_classes, derive_seed(seed, stream::INIT))?;
    let mut opt = Sgd::new(cfg.sgd, model.n_params());
    let mut dro = match method {
        RobustMethod::Dro => Some(DroState::new(groups, cfg.dro)?),
        _ => None,
    };
    let mut warnings = Vec::new();
    if method == RobustMethod::Contrastive && cfg.arch == Arch::Linear {
        warnings.push(Warning::new(
            "train_robust",
            "linear architecture: the contrastive term has no trainable representation",
        ));
    }

    let by_group: BTreeMap<GroupId, Vec<usize>> = {
        let mut m: BTreeMap<GroupId, Vec<usize>> = BTreeMap::new();
        for (i, ex) in train.iter().enumerate() {
            m.entry(ex.group).or_default().push(i);
        }
        m
    };
    let mut contrastive_rng = rng_for(seed, stream::CONTRASTIVE);
    let mut skipped_anchors = 0usize;
    let mut warned_replacement = false;

    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let mut best: Option<(f64, f64, usize, Vec<f64>)> = None;
    let mut evaluate =
        |model: &SoftmaxClassifier, epoch: usize, q: Option<Vec<f64>>, warnings: &mut Vec<Warning>| -> Result<()> {
            if validation.is_empty() {
                return Ok(());
            }
            let report = evaluate_model(model, validation, groups)?;
            if epoch == 0 {
                warnings.extend(report.warnings.iter().cloned());
            }
            // the untrained initial model only competes when nothing is trained
            let candidate = epoch > 0 || cfg.epochs == 0;
            let better = candidate
                && match &best {
                    None => true,
                    Some((bw, ba, _, _)) => {
                        report.worst_group_accuracy > *bw
                            || (report.worst_group_accuracy == *bw && report.average_accuracy >= *ba)
                    }
                };
            if better {
                best = Some((
                    report.worst_group_accuracy,
                    report.average_accuracy,
                    epoch,
                    model.params.clone(),
                ));
            }
            log.push(EpochLog {
                epoch,
                average_accuracy: report.average_accuracy,
                worst_group_accuracy: report.worst_group_accuracy,
                per_group: report.per_group,
                q,
            });
            Ok(())
        };

    evaluate(&model, 0, dro.as_ref().map(|d| d.q.clone()), &mut warnings)?;
    let mut cycler = BatchCycler::new(train.len(), derive_seed(seed, stream::BATCHES));
    let steps_per_epoch = train.len().div_ceil(cfg.sgd.batch_size);
    for epoch in 1..=cfg.epochs {
        for _ in 0..steps_per_epoch {
            let batch: Vec<RobustExample> = cycler
                .next_batch(cfg.sgd.batch_size)
                .into_iter()
                .map(|i| train[i])
                .collect();
            match method {
                RobustMethod::Erm => erm_step(&mut model, &batch, &mut opt)?,
                RobustMethod::Dro => {
                    group_dro_step(&mut model, dro.as_mut().expect("dro state"), &batch, &mut opt)?;
                }
                RobustMethod::Contrastive => {
                    let (skipped, replaced) = contrastive_step(
                        &mut model,
                        &batch,
                        train,
                        &by_group,
                        &cfg.contrastive,
                        &mut opt,
                        &mut contrastive_rng,
                    )?;
                    skipped_anchors += skipped;
                    if replaced && !warned_replacement {
                        warned_replacement = true;
                        warnings.push(Warning::new(
                            "sample_contrastive_batch",
                            "a group smaller than m was sampled with replacement",
                        ));
                    }
                }
            }
        }
        evaluate(&model, epoch, dro.as_ref().map(|d| d.q.clone()), &mut warnings)?;
    }
    if skipped_anchors > 0 {
        warnings.push(Warning::new(
            "sample_contrastive_batch",
            format!("{skipped_anchors} anchors skipped for lack of positives or negatives"),
        ));
    }

    let selected_epoch = match best {
        Some((_, _, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => {
            warnings.push(Warning::new(
                "train_robust",
                "empty validation set; final epoch returned",
            ));
            cfg.epochs
        }
    };
    Ok(RobustOutput {
        model,
        log,
        selected_epoch,
        dro,
        skipped_anchors,
        warnings,
    })
}

/// One step on `(1 - w) * CE + w * contrastive`, both averaged over anchors.
/// Returns (skipped anchors, whether any group was drawn with replacement).
fn contrastive_step(
    model: &mut SoftmaxClassifier,
    batch: &[RobustExample<'_>],
    train: &[RobustExample<'_>],
    by_group: &BTreeMap<GroupId, Vec<usize>>,
    cfg: &ContrastiveConfig,
    opt: &mut Sgd,
    rng: &mut impl Rng,
) -> Result<(usize, bool)> {
    let w = cfg.contrastive_weight;
    let mut grad = vec![0.0; model.n_params()];
    let ce_weight = (1.0 - w) / batch.len() as f64;
    let examples: Vec<WeightedExample> = batch
        .iter()
        .map(|ex| WeightedExample::new(ex.x, ex.y, ce_weight))
        .collect();
    model.accumulate_weighted_grad(&examples, &mut grad)?;

    let sampled: Vec<Option<ContrastiveBatch>> = batch
        .iter()
        .map(|ex| sample_contrastive_batch(ex.group, by_group, cfg.m, rng))
        .collect();
    let valid = sampled.iter().filter(|s| s.is_some()).count();
    let skipped = batch.len() - valid;
    let replaced = sampled.iter().flatten().any(|s| s.with_replacement);
    if valid > 0 && w > 0.0 && matches!(model.arch, Arch::Mlp { .. }) {
        let scale = w / valid as f64;
        for (ex, cb) in batch.iter().zip(&sampled) {
            let Some(cb) = cb else { continue };
            let pos: Vec<&[f64]> = cb.positives.iter().map(|&i| train[i].x).collect();
            let neg: Vec<&[f64]> = cb.negatives.iter().map(|&i| train[i].x).collect();
            accumulate_contrastive_grad(model, ex.x, &pos, &neg, cfg.temperature, scale, &mut grad)?;
        }
    }
    opt.step(model, &grad);
    Ok((skipped, replaced))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(y: usize, a: usize) -> GroupId {
        GroupId::new(y, a)
    }

    #[test]
    fn q_update_cases() {
        let groups = [g(0, 0), g(0, 1)];
        let mut d = DroState::new(
            &groups,
            DroConfig {
                eta_q: 0.3,
                ..Default::default()
            },
        )
        .unwrap();
        d.update(&[Some(0.7), Some(0.7)]);
        assert!((d.q[0] - 0.5).abs() < 1e-15);

        let mut d = DroState::new(
            &groups,
            DroConfig {
                eta_q: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        d.update(&[Some(3.0), Some(0.1)]);
        assert_eq!(d.q, vec![0.5, 0.5]);

        // 0.5 * 2 / (0.5 * 2 + 0.5) = 2/3
        let mut d = DroState::new(
            &groups,
            DroConfig {
                eta_q: 2f64.ln(),
                ..Default::default()
            },
        )
        .unwrap();
        d.update(&[Some(1.0), Some(0.0)]);
        assert!((d.q[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.q[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn missing_group_policies() {
        let groups = [g(0, 0), g(0, 1)];
        let cfg = DroConfig {
            eta_q: 1.0,
            missing_groups: MissingGroupPolicy::CarryPrevious,
        };
        let mut d = DroState::new(&groups, cfg).unwrap();
        d.update(&[Some(1.0), Some(1.0)]);
        d.update(&[None, Some(1.0)]);
        assert!((d.q[0] - 0.5).abs() < 1e-15);
        let mut z = DroState::new(
            &groups,
            DroConfig {
                eta_q: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        z.update(&[None, Some(1.0)]);
        assert!(z.q[1] > z.q[0]);
    }

    fn toy_batch() -> (Vec<Vec<f64>>, Vec<(usize, GroupId)>) {
        let xs = vec![vec![1.0, 0.2], vec![-0.5, 1.0], vec![0.3, -1.0], vec![-1.2, -0.4]];
        let meta = vec![(0, g(0, 0)), (1, g(1, 1)), (0, g(0, 1)), (1, g(1, 0))];
        (xs, meta)
    }

    #[test]
    fn erm_equals_frozen_uniform_dro() {
        let (xs, meta) = toy_batch();
        let batch: Vec<RobustExample> = xs
            .iter()
            .zip(&meta)
            .map(|(x, &(y, group))| RobustExample { x, y, group })
            .collect();
        let model = SoftmaxClassifier::new(Arch::Linear, 2, 2, 3).unwrap();
        let cfg = SgdConfig::default();
        let mut m1 = model.clone();
        erm_step(&mut m1, &batch, &mut Sgd::new(cfg, model.n_params())).unwrap();
        let mut m2 = model.clone();
        let mut d = DroState::new(
            &GroupId::grid(2, 2),
            DroConfig {
                eta_q: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        group_dro_step(&mut m2, &mut d, &batch, &mut Sgd::new(cfg, model.n_params())).unwrap();
        for (a, b) in m1.params.iter().zip(&m2.params) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn erm_zero_rate_and_single_sample() {
        let (xs, meta) = toy_batch();
        let one = [RobustExample {
            x: &xs[0],
            y: meta[0].0,
            group: meta[0].1,
        }];
        let model = SoftmaxClassifier::new(Arch::Linear, 2, 2, 3).unwrap();
        let cfg = SgdConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            ..Default::default()
        };
        let mut m = model.clone();
        erm_step(&mut m, &one, &mut Sgd::new(cfg, model.n_params())).unwrap();
        let g1 = model.grad(&[WeightedExample::new(&xs[0], meta[0].0, 1.0)]).unwrap();
        for ((after, before), gi) in m.params.iter().zip(&model.params).zip(&g1) {
            assert!((before - after - gi).abs() < 1e-15);
        }
        let mut frozen = model.clone();
        let zero_lr = SgdConfig {
            learning_rate: f64::MIN_POSITIVE,
            ..Default::default()
        };
        erm_step(&mut frozen, &one, &mut Sgd::new(zero_lr, model.n_params())).unwrap();
        assert_eq!(frozen.params, model.params);
    }

    #[test]
    fn q_stays_on_simplex() {
        let (xs, meta) = toy_batch();
        let batch: Vec<RobustExample> = xs
            .iter()
            .zip(&meta)
            .map(|(x, &(y, group))| RobustExample { x, y, group })
            .collect();
        let mut model = SoftmaxClassifier::new(Arch::Mlp { hidden: 3 }, 2, 2, 8).unwrap();
        let mut opt = Sgd::new(SgdConfig::default(), model.n_params());
        let mut d = DroState::new(
            &GroupId::grid(2, 2),
            DroConfig {
                eta_q: 0.5,
                ..Default::default()
            },
        )
        .unwrap();
        for step in 0..200 {
            let sub = &batch[step % 4..(step % 4 + 2).min(4)];
            group_dro_step(&mut model, &mut d, sub, &mut opt).unwrap();
            assert!((d.q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.q.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn untracked_group_rejected() {
        let x = [0.0, 1.0];
        let batch = [RobustExample {
            x: &x,
            y: 0,
            group: g(5, 5),
        }];
        let mut model = SoftmaxClassifier::new(Arch::Linear, 2, 2, 1).unwrap();
        let mut d = DroState::new(&GroupId::grid(2, 2), DroConfig::default()).unwrap();
        let mut opt = Sgd::new(SgdConfig::default(), model.n_params());
        assert!(group_dro_step(&mut model, &mut d, &batch, &mut opt).is_err());
    }

    #[test]
    fn contrastive_batch_structure() {
        let by_group: BTreeMap<GroupId, Vec<usize>> = [
            (g(0, 0), (0..40).collect()),
            (g(0, 1), (40..45).collect()),
            (g(1, 0), (45..80).collect()),
            (g(1, 1), (80..120).collect()),
        ]
        .into();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = sample_contrastive_batch(g(0, 0), &by_group, 16, &mut rng).unwrap();
        assert_eq!(cb.positives.len(), 16);
        assert!(cb.positives.iter().all(|i| (40..45).contains(i)));
        assert!(cb.with_replacement);
        assert_eq!(cb.negatives.len(), 16);
        assert!(cb.negatives.iter().all(|i| (45..80).contains(i)));
        let mut uniq = cb.negatives.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 16);

        let mut lacking = by_group.clone();
        lacking.remove(&g(0, 1));
        assert!(sample_contrastive_batch(g(0, 0), &lacking, 16, &mut rng).is_none());
        assert_eq!(ContrastiveConfig::default().m, 16);
    }

    #[test]
    fn contrastive_loss_values() {
        let z = vec![0.3, -0.2];
        let same = vec![z.clone(), z.clone()];
        assert!((contrastive_loss(&z, &same, &[z.clone()], 0.7) - 3f64.ln()).abs() < 1e-12);

        let l = contrastive_loss(&[1.0, 0.0], &[vec![1.0, 0.0]], &[vec![0.0, 1.0]], 1.0);
        let e = 1f64.exp();
        assert!((l + (e / (e + 1.0)).ln()).abs() < 1e-15);

        let hot = contrastive_loss(&[1.0, 0.0], &[vec![0.2, 1.0], vec![1.0, 1.0]], &[vec![-1.0, 0.4]], 1e9);
        assert!((hot - 3f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut v = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let anchor = v(1).pop().unwrap();
        let pos = v(2);
        let neg = v(3);
        let t = 0.5;
        let g = contrastive_loss_grad(&anchor, &pos, &neg, t);
        let h = 1e-6;
        let check = |analytic: f64, f: &dyn Fn(f64) -> f64| {
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((analytic - fd).abs() < 1e-6 * fd.abs().max(1.0), "{analytic} vs {fd}");
        };
        for k in 0..3 {
            check(g.d_anchor[k], &|e| {
                let mut a = anchor.clone();
                a[k] += e;
                contrastive_loss(&a, &pos, &neg, t)
            });
            check(g.d_positives[1][k], &|e| {
                let mut p = pos.clone();
                p[1][k] += e;
                contrastive_loss(&anchor, &p, &neg, t)
            });
            check(g.d_negatives[2][k], &|e| {
                let mut n = neg.clone();
                n[2][k] += e;
                contrastive_loss(&anchor, &pos, &n, t)
            });
        }
    }

    #[test]
    fn zero_epochs_return_initial_model() {
        let (xs, meta) = toy_batch();
        let train: Vec<RobustExample> = xs
            .iter()
            .zip(&meta)
            .map(|(x, &(y, group))| RobustExample { x, y, group })
            .collect();
        let val: Vec<Sample> = xs
            .iter()
            .zip(&meta)
            .map(|(x, &(y, gid))| Sample {
                x: x.clone(),
                y,
                a: Some(gid.a),
            })
            .collect();
        let cfg = RobustConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train_robust(&train, &val, 2, &GroupId::grid(2, 2), RobustMethod::Dro, &cfg, 3).unwrap();
        let init = SoftmaxClassifier::new(Arch::Linear, 2, 2, derive_seed(3, stream::INIT)).unwrap();
        assert_eq!(out.model.params, init.params);
        assert_eq!(out.selected_epoch, 0);
        assert_eq!(out.log.len(), 1);
    }
}
