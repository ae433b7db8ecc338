//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssa_core::datagen::GroupId;
use ssa_core::model::{Arch, SoftmaxClassifier, WeightedExample};
use ssa_core::pseudolabel::PseudoPrediction;

/// Thresholds by exhaustive search: for every group other than the anchor,
/// try each confidence that occurs in the group as a threshold and keep the
/// smallest one whose admitted count fits the budget. `None` means blocked.
pub fn brute_force_thresholds(
    counts: &BTreeMap<GroupId, usize>,
    preds: &[(GroupId, f64)],
    tau_g_min: f64,
) -> (GroupId, usize, BTreeMap<GroupId, Option<f64>>) {
    let mut ranked: Vec<(usize, GroupId)> = counts.iter().map(|(&g, &c)| (c, g)).collect();
    ranked.sort();
    let g_min = ranked[0].1;
    let budget = counts[&g_min] + preds.iter().filter(|(g, c)| *g == g_min && *c >= tau_g_min).count();

    let groups: BTreeSet<GroupId> = counts.keys().copied().chain(preds.iter().map(|(g, _)| *g)).collect();
    let mut tau = BTreeMap::new();
    for g in groups {
        if g == g_min {
            tau.insert(g, Some(tau_g_min));
            continue;
        }
        let labeled = counts.get(&g).copied().unwrap_or(0);
        let confs: Vec<f64> = preds.iter().filter(|(h, _)| *h == g).map(|(_, c)| *c).collect();
        let mut best: Option<f64> = None;
        for &t in &confs {
            let admitted = confs.iter().filter(|&&c| c >= t).count();
            if labeled + admitted <= budget && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
        tau.insert(g, best);
    }
    (g_min, budget, tau)
}

/// Random threshold instance: up to `max_groups` groups over a 4x2 grid,
/// up to `max_preds` predictions. Confidences come from a coarse lattice
/// half the time so that ties are common.
pub fn random_threshold_instance(
    rng: &mut impl Rng,
    max_groups: usize,
    max_preds: usize,
) -> (BTreeMap<GroupId, usize>, Vec<PseudoPrediction>, f64) {
    let grid = GroupId::grid(4, 2);
    let n_groups = rng.random_range(1..=max_groups.min(grid.len()));
    let mut chosen = grid.clone();
    for i in 0..chosen.len() {
        let j = rng.random_range(i..chosen.len());
        chosen.swap(i, j);
    }
    chosen.truncate(n_groups);
    let mut counts: BTreeMap<GroupId, usize> = chosen.iter().map(|&g| (g, rng.random_range(0..8))).collect();
    if counts.values().all(|&c| c == 0) {
        *counts.values_mut().next().unwrap() = 1;
    }
    let lattice = rng.random_bool(0.5);
    let n_preds = rng.random_range(0..=max_preds);
    let preds = (0..n_preds)
        .map(|i| {
            let g = chosen[rng.random_range(0..chosen.len())];
            let confidence = if lattice {
                0.5 + rng.random_range(0..=10) as f64 * 0.05
            } else {
                rng.random_range(0.5..=1.0)
            };
            PseudoPrediction {
                sample_idx: i,
                pseudo_attr: g.a,
                confidence,
                pseudo_group: g,
            }
        })
        .collect();
    let tau = if lattice {
        0.5 + rng.random_range(0..=10) as f64 * 0.05
    } else {
        rng.random_range(0.5..=1.0)
    };
    (counts, preds, tau)
}

/// Central finite-difference gradient of `f` at `params`.
pub fn finite_difference(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// ||a - b|| / max(||a||, ||b||), with a floor on the denominator.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

/// Weighted cross-entropy of a model evaluated from raw parameters, written
/// out directly rather than through the library's loss.
pub fn reference_loss(model: &SoftmaxClassifier, params: &[f64], batch: &[(Vec<f64>, usize, f64)]) -> f64 {
    let mut m = model.clone();
    m.params = params.to_vec();
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y, w) in batch {
        let logits = m.logits(x).unwrap();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        num += w * (lse - logits[*y]);
        den += w;
    }
    num / den
}

pub fn random_model(rng: &mut ChaCha8Rng) -> SoftmaxClassifier {
    let in_dim = rng.random_range(1..6);
    let out_dim = rng.random_range(2..5);
    let arch = if rng.random_bool(0.5) {
        Arch::Linear
    } else {
        Arch::Mlp {
            hidden: rng.random_range(1..7),
        }
    };
    let mut m = SoftmaxClassifier::new(arch, in_dim, out_dim, rng.random()).unwrap();
    // move away from the small-init regime so softmax outputs are not flat
    for p in &mut m.params {
        *p *= 3.0;
    }
    m
}

pub fn random_batch(rng: &mut ChaCha8Rng, model: &SoftmaxClassifier) -> Vec<(Vec<f64>, usize, f64)> {
    let n = rng.random_range(1..12);
    (0..n)
        .map(|_| {
            let x = (0..model.in_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            (x, rng.random_range(0..model.out_dim), rng.random_range(0.05..2.0))
        })
        .collect()
}

pub fn as_weighted(batch: &[(Vec<f64>, usize, f64)]) -> Vec<WeightedExample<'_>> {
    batch.iter().map(|(x, y, w)| WeightedExample::new(x, *y, *w)).collect()
}

/// Two-group, 20-sample, one-feature logistic problem whose groups disagree
/// on the decision rule, so the minimax solution is interior.
pub fn dro_toy_problem() -> Vec<(f64, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::with_capacity(20);
    for group in 0..2 {
        for _ in 0..10 {
            let x: f64 = rng.random_range(-2.0..2.0);
            let logit = if group == 0 { 2.0 * x + 0.5 } else { 1.0 - x };
            let y = usize::from(rng.random_bool(1.0 / (1.0 + (-logit).exp())));
            out.push((x, y, group));
        }
    }
    out
}

/// Mean logistic loss of each group at slope `w` and intercept `b`.
pub fn toy_group_losses(data: &[(f64, usize, usize)], w: f64, b: f64) -> [f64; 2] {
    let mut sum = [0.0; 2];
    let mut n = [0usize; 2];
    for &(x, y, g) in data {
        let z = w * x + b;
        let signed = if y == 1 { z } else { -z };
        // log(1 + exp(-signed)), stable
        sum[g] += (-signed).max(0.0) + (-signed.abs()).exp().ln_1p();
        n[g] += 1;
    }
    [sum[0] / n[0] as f64, sum[1] / n[1] as f64]
}

/// min over a parameter grid of the worst group loss, refined once around
/// the coarse optimum.
pub fn grid_minimax(data: &[(f64, usize, usize)]) -> (f64, f64, f64) {
    let search = |w0: f64, b0: f64, half: f64, steps: usize| {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=steps {
            for j in 0..=steps {
                let w = w0 - half + 2.0 * half * i as f64 / steps as f64;
                let b = b0 - half + 2.0 * half * j as f64 / steps as f64;
                let l = toy_group_losses(data, w, b);
                let worst = l[0].max(l[1]);
                if worst < best.0 {
                    best = (worst, w, b);
                }
            }
        }
        best
    };
    let (_, w, b) = search(0.0, 0.0, 6.0, 600);
    search(w, b, 0.05, 200)
}
