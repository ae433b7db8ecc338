//! Synthetic datasets with a controllable shortcut or class imbalance, and the
//! labeled/unlabeled splits the pseudo-labeling phase works on.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SsaError, Warning};
use crate::seed::{rng_for, stream};

pub const DEFAULT_FOLDS: usize = 3;

/// Group identity `(y, a)`. Ordered lexicographically by `(y, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub y: usize,
    pub a: usize,
}

impl GroupId {
    pub const fn new(y: usize, a: usize) -> Self {
        Self { y, a }
    }

    /// Every group of a `n_classes x n_attrs` grid in lexicographic order.
    pub fn grid(n_classes: usize, n_attrs: usize) -> Vec<GroupId> {
        (0..n_classes)
            .flat_map(|y| (0..n_attrs).map(move |a| GroupId::new(y, a)))
            .collect()
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.y, self.a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub a: Option<usize>,
}

impl Sample {
    pub fn group(&self) -> Option<GroupId> {
        self.a.map(|a| GroupId::new(self.y, a))
    }

    /// Copy of the sample with the attribute removed.
    pub fn stripped(&self) -> Sample {
        Sample {
            x: self.x.clone(),
            y: self.y,
            a: None,
        }
    }
}

/// Ground-truth attributes of the unlabeled set. Only evaluation code reads
/// these; training entry points take `&[Sample]` views whose `a` is `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenAttributes(Vec<usize>);

impl HiddenAttributes {
    pub fn new(attrs: Vec<usize>) -> Self {
        Self(attrs)
    }

    /// Evaluation-only access.
    pub fn reveal(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub dim: usize,
    pub n_classes: usize,
    pub n_attrs: usize,
    /// Group-labeled set; every sample carries `a`.
    pub labeled: Vec<Sample>,
    /// Group-unlabeled set; `a` is always `None`.
    pub unlabeled: Vec<Sample>,
    hidden: Option<HiddenAttributes>,
    /// Held-out evaluation set with ground-truth groups.
    pub test: Vec<Sample>,
    pub labeled_train: Vec<usize>,
    pub labeled_holdout: Vec<usize>,
    pub unlabeled_folds: Vec<Vec<usize>>,
    pub rng_seed: u64,
    pub warnings: Vec<Warning>,
}

impl DatasetBundle {
    /// Assemble a bundle from raw sets and compute its splits.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        n_classes: usize,
        n_attrs: usize,
        labeled: Vec<Sample>,
        unlabeled: Vec<Sample>,
        hidden: Option<HiddenAttributes>,
        test: Vec<Sample>,
        k_folds: usize,
        seed: u64,
    ) -> Result<Self> {
        validate_samples(&labeled, dim, n_classes, n_attrs, true)?;
        validate_samples(&test, dim, n_classes, n_attrs, true)?;
        validate_samples(&unlabeled, dim, n_classes, n_attrs, false)?;
        if let Some(h) = &hidden {
            if h.len() != unlabeled.len() {
                return Err(invalid("hidden attribute count differs from unlabeled set size"));
            }
        }
        let mut bundle = Self {
            dim,
            n_classes,
            n_attrs,
            labeled,
            unlabeled: unlabeled.iter().map(Sample::stripped).collect(),
            hidden,
            test,
            labeled_train: Vec::new(),
            labeled_holdout: Vec::new(),
            unlabeled_folds: Vec::new(),
            rng_seed: seed,
            warnings: Vec::new(),
        };
        bundle.resplit(k_folds, seed)?;
        Ok(bundle)
    }

    /// Recompute the labeled split and the unlabeled folds from `seed`.
    /// `k_folds = 1` puts every unlabeled sample in a single fold.
    pub fn resplit(&mut self, k_folds: usize, seed: u64) -> Result<()> {
        let split = split_labeled(&self.labeled, seed)?;
        self.labeled_train = split.train;
        self.labeled_holdout = split.holdout;
        self.warnings = split.warnings;
        self.unlabeled_folds = if k_folds == 1 {
            vec![(0..self.unlabeled.len()).collect()]
        } else {
            split_unlabeled_kfold(&self.unlabeled, k_folds, seed)?
        };
        self.rng_seed = seed;
        Ok(())
    }

    pub fn hidden_attributes(&self) -> Option<&HiddenAttributes> {
        self.hidden.as_ref()
    }

    pub fn groups(&self) -> Vec<GroupId> {
        GroupId::grid(self.n_classes, self.n_attrs)
    }

    /// Unlabeled samples re-attached to their hidden attributes (evaluation only).
    pub fn unlabeled_with_truth(&self) -> Option<Vec<Sample>> {
        let hidden = self.hidden.as_ref()?;
        Some(
            self.unlabeled
                .iter()
                .zip(hidden.reveal())
                .map(|(s, &a)| Sample {
                    x: s.x.clone(),
                    y: s.y,
                    a: Some(a),
                })
                .collect(),
        )
    }

    /// Keep `fraction` of each labeled group (at least one sample per
    /// nonempty group) and recompute the splits.
    pub fn subsample_labeled(&mut self, fraction: f64, k_folds: usize, seed: u64) -> Result<()> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(invalid(format!("labeled fraction {fraction} outside (0, 1]")));
        }
        if fraction < 1.0 {
            let mut rng = rng_for(seed, stream::SUBSAMPLE);
            let mut keep = Vec::new();
            for members in group_members(&self.labeled).values() {
                let mut members = members.clone();
                members.shuffle(&mut rng);
                let n_keep = ((members.len() as f64 * fraction).round() as usize).max(1);
                keep.extend_from_slice(&members[..n_keep.min(members.len())]);
            }
            keep.sort_unstable();
            self.labeled = keep.into_iter().map(|i| self.labeled[i].clone()).collect();
        }
        self.resplit(k_folds, seed)
    }
}

fn validate_samples(samples: &[Sample], dim: usize, n_classes: usize, n_attrs: usize, need_attr: bool) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.x.len() != dim {
            return Err(SsaError::DimensionMismatch {
                expected: dim,
                got: s.x.len(),
            });
        }
        if s.y >= n_classes {
            return Err(SsaError::LabelOutOfRange {
                label: s.y,
                classes: n_classes,
            });
        }
        match s.a {
            Some(a) if a >= n_attrs => {
                return Err(SsaError::LabelOutOfRange {
                    label: a,
                    classes: n_attrs,
                })
            }
            None if need_attr => return Err(SsaError::MissingAttribute(i)),
            _ => {}
        }
    }
    Ok(())
}

/// Indices of each group's members, groups in lexicographic order.
pub fn group_members(samples: &[Sample]) -> BTreeMap<GroupId, Vec<usize>> {
    let mut map: BTreeMap<GroupId, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(g) = s.group() {
            map.entry(g).or_default().push(i);
        }
    }
    map
}

pub fn group_counts<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> BTreeMap<GroupId, usize> {
    let mut map = BTreeMap::new();
    for s in samples {
        if let Some(g) = s.group() {
            *map.entry(g).or_insert(0) += 1;
        }
    }
    map
}

/// Two-attribute, two-class data where the attribute agrees with the label
/// with probability `p_maj`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpuriousGenConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub p_maj: f64,
    pub mu_core: f64,
    pub mu_spur: f64,
    pub sigma_core: f64,
    pub sigma_spur: f64,
    pub d_core: usize,
    pub d_spur: usize,
    pub seed: u64,
}

impl Default for SpuriousGenConfig {
    fn default() -> Self {
        Self {
            n_labeled: 400,
            n_unlabeled: 20_000,
            n_test: 8_000,
            p_maj: 0.95,
            mu_core: 0.4,
            mu_spur: 1.0,
            sigma_core: 1.0,
            sigma_spur: 1.0,
            d_core: 5,
            d_spur: 5,
            seed: 0,
        }
    }
}

impl SpuriousGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_maj) {
            return Err(invalid(format!("p_maj = {} outside [0, 1]", self.p_maj)));
        }
        if self.d_core == 0 || self.d_spur == 0 {
            return Err(invalid("d_core and d_spur must be at least 1"));
        }
        if !(self.sigma_core > 0.0 && self.sigma_spur > 0.0) {
            return Err(invalid("standard deviations must be positive"));
        }
        if !(self.mu_core.is_finite() && self.mu_spur.is_finite()) {
            return Err(invalid("means must be finite"));
        }
        if self.n_labeled == 0 {
            return Err(invalid("n_labeled must be at least 1"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d_core + self.d_spur
    }

    fn draw(&self, rng: &mut impl Rng) -> Sample {
        let y = rng.random_range(0..2usize);
        let a = if rng.random::<f64>() < self.p_maj { y } else { 1 - y };
        let sign = |v: usize| if v == 1 { 1.0 } else { -1.0 };
        let core = Normal::new(sign(y) * self.mu_core, self.sigma_core).expect("validated");
        let spur = Normal::new(sign(a) * self.mu_spur, self.sigma_spur).expect("validated");
        let mut x = Vec::with_capacity(self.dim());
        x.extend((0..self.d_core).map(|_| core.sample(rng)));
        x.extend((0..self.d_spur).map(|_| spur.sample(rng)));
        Sample { x, y, a: Some(a) }
    }
}

pub fn make_spurious_dataset(cfg: &SpuriousGenConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let draw_n = |n: usize, tag: u64| {
        let mut rng = rng_for(cfg.seed, tag);
        (0..n).map(|_| cfg.draw(&mut rng)).collect::<Vec<_>>()
    };
    let labeled = draw_n(cfg.n_labeled, stream::DATA_LABELED);
    let unlabeled_full = draw_n(cfg.n_unlabeled, stream::DATA_UNLABELED);
    let test = draw_n(cfg.n_test, stream::DATA_TEST);
    let hidden = HiddenAttributes::new(unlabeled_full.iter().map(|s| s.a.unwrap()).collect());
    let k = if cfg.n_unlabeled >= DEFAULT_FOLDS {
        DEFAULT_FOLDS
    } else {
        1
    };
    DatasetBundle::new(
        cfg.dim(),
        2,
        2,
        labeled,
        unlabeled_full,
        Some(hidden),
        test,
        k,
        cfg.seed,
    )
}

/// Class-imbalanced semi-supervised data. Classes play the role of groups:
/// every sample has target `y = 0` and attribute `a = class`, so the group
/// `(0, class)` identifies the class and the unlabeled set hides the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImbalancedSslConfig {
    pub n_classes: usize,
    pub m_maj: usize,
    pub gamma_lab: f64,
    pub n_maj: usize,
    pub gamma_unlab: f64,
    /// Balanced test samples per class.
    pub n_test_per_class: usize,
    pub dim: usize,
    /// Distance of each class mean from the origin along its own axis.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for ImbalancedSslConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            m_maj: 100,
            gamma_lab: 50.0,
            n_maj: 4900,
            gamma_unlab: 1.0,
            n_test_per_class: 500,
            dim: 10,
            class_separation: 3.0,
            seed: 0,
        }
    }
}

impl ImbalancedSslConfig {
    /// The (m_maj, n_maj, gamma_lab) = (100, 4900, 50) setting.
    pub fn preset_100_4900_50() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if !(self.gamma_lab >= 1.0 && self.gamma_unlab >= 1.0) {
            return Err(invalid("imbalance ratios must be at least 1"));
        }
        if self.m_maj == 0 || self.n_maj == 0 {
            return Err(invalid("class counts must be at least 1"));
        }
        if self.dim < self.n_classes {
            return Err(invalid("dim must be at least n_classes"));
        }
        if !(self.class_separation > 0.0) {
            return Err(invalid("class_separation must be positive"));
        }
        Ok(())
    }

    pub fn labeled_sizes(&self) -> Vec<usize> {
        class_sizes(self.m_maj, self.gamma_lab, self.n_classes)
    }

    pub fn unlabeled_sizes(&self) -> Vec<usize> {
        class_sizes(self.n_maj, self.gamma_unlab, self.n_classes)
    }

    fn draw(&self, class: usize, rng: &mut impl Rng) -> Sample {
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let x = (0..self.dim)
            .map(|j| {
                let mean = if j == class { self.class_separation } else { 0.0 };
                mean + noise.sample(rng)
            })
            .collect();
        Sample {
            x,
            y: 0,
            a: Some(class),
        }
    }
}

/// Exponentially decaying class sizes `round(n_max * gamma^(-(k-1)/(K-1)))`,
/// `k = 1..K`, floored at 1.
pub fn class_sizes(n_max: usize, gamma: f64, n_classes: usize) -> Vec<usize> {
    if n_classes == 1 {
        return vec![n_max.max(1)];
    }
    (0..n_classes)
        .map(|k| {
            let exponent = -(k as f64) / (n_classes - 1) as f64;
            ((n_max as f64 * gamma.powf(exponent)).round() as usize).max(1)
        })
        .collect()
}

pub fn make_imbalanced_ssl(cfg: &ImbalancedSslConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let draw_sizes = |sizes: &[usize], tag: u64| {
        let mut rng = rng_for(cfg.seed, tag);
        let mut out = Vec::with_capacity(sizes.iter().sum());
        for (class, &n) in sizes.iter().enumerate() {
            out.extend((0..n).map(|_| cfg.draw(class, &mut rng)));
        }
        out
    };
    let labeled = draw_sizes(&cfg.labeled_sizes(), stream::DATA_LABELED);
    let mut unlabeled_full = draw_sizes(&cfg.unlabeled_sizes(), stream::DATA_UNLABELED);
    // interleave classes so folds and batches are not class-sorted
    unlabeled_full.shuffle(&mut rng_for(cfg.seed, stream::DATA_UNLABELED + 100));
    let test = draw_sizes(&vec![cfg.n_test_per_class; cfg.n_classes], stream::DATA_TEST);
    let hidden = HiddenAttributes::new(unlabeled_full.iter().map(|s| s.a.unwrap()).collect());
    let k = if unlabeled_full.len() >= DEFAULT_FOLDS {
        DEFAULT_FOLDS
    } else {
        1
    };
    DatasetBundle::new(
        cfg.dim,
        1,
        cfg.n_classes,
        labeled,
        unlabeled_full,
        Some(hidden),
        test,
        k,
        cfg.seed,
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSplit {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    pub warnings: Vec<Warning>,
}

/// Stratified half split of the labeled set. Each group's members are split
/// as evenly as possible; odd groups alternate which half gets the extra
/// member so totals come out as `ceil(m/2)` and `floor(m/2)`. A group with a
/// single member always sends it to the train half.
pub fn split_labeled(labeled: &[Sample], seed: u64) -> Result<LabeledSplit> {
    if labeled.is_empty() {
        return Err(SsaError::EmptyInput("labeled set"));
    }
    let mut rng = rng_for(seed, stream::SPLIT_LABELED);
    let groups = group_members(labeled);
    if groups.values().map(Vec::len).sum::<usize>() != labeled.len() {
        return Err(invalid("every labeled sample must carry an attribute"));
    }

    let mut train = Vec::with_capacity(labeled.len() / 2 + 1);
    let mut holdout = Vec::with_capacity(labeled.len() / 2);
    let mut warnings = Vec::new();
    let mut singletons = Vec::new();
    let mut odd_groups = Vec::new();

    for (g, members) in &groups {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let half = members.len() / 2;
        train.extend_from_slice(&members[..half]);
        holdout.extend_from_slice(&members[half..2 * half]);
        if members.len() % 2 == 1 {
            let extra = members[members.len() - 1];
            if members.len() == 1 {
                warnings.push(Warning::new(
                    "split_labeled",
                    format!("group {g} has a single labeled sample; holdout lacks this group"),
                ));
                singletons.push(extra);
            } else {
                odd_groups.push(extra);
            }
        }
    }

    odd_groups.shuffle(&mut rng);
    let n_odd = singletons.len() + odd_groups.len();
    let extra_to_train = n_odd.div_ceil(2).saturating_sub(singletons.len());
    train.extend(singletons);
    for (i, idx) in odd_groups.into_iter().enumerate() {
        if i < extra_to_train {
            train.push(idx);
        } else {
            holdout.push(idx);
        }
    }
    train.sort_unstable();
    holdout.sort_unstable();
    Ok(LabeledSplit {
        train,
        holdout,
        warnings,
    })
}

/// Partition unlabeled indices into `k` folds whose sizes differ by at most one.
pub fn split_unlabeled_kfold(unlabeled: &[Sample], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    kfold_indices(unlabeled.len(), k, seed)
}

pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(invalid(format!("fold count must be at least 2, got {k}")));
    }
    if k > n {
        return Err(invalid(format!("fold count {k} exceeds sample count {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, stream::SPLIT_FOLDS));
    let base = n / k;
    let rem = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < rem);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}
