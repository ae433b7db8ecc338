//! Browser bindings: a scatter of generated data, adaptive vs fixed
//! threshold traces, and ERM vs Group DRO validation curves. Each export
//! returns a JSON string.

use serde::Serialize;
use ssa_core::datagen::{make_spurious_dataset, SpuriousGenConfig};
use ssa_core::pseudolabel::{train_attr_predictor, PseudoLabelConfig};
use ssa_core::robust::{train_robust, RobustConfig, RobustExample, RobustMethod};
use ssa_core::{DatasetBundle, GroupId, Result, Sample};
use wasm_bindgen::prelude::*;

fn dataset(p_maj: f64, n_labeled: usize, n_unlabeled: usize, seed: u64) -> Result<DatasetBundle> {
    make_spurious_dataset(&SpuriousGenConfig {
        n_labeled,
        n_unlabeled,
        n_test: 200,
        p_maj,
        seed,
        ..Default::default()
    })
}

#[derive(Debug, Serialize)]
pub struct Point {
    pub core: f64,
    pub spurious: f64,
    pub y: usize,
    pub a: usize,
}

/// First core and first spurious coordinate of every unlabeled sample,
/// with its true group.
pub fn scatter(p_maj: f64, n: usize, seed: u64) -> Result<Vec<Point>> {
    let bundle = dataset(p_maj, 40, n, seed)?;
    let d_core = SpuriousGenConfig::default().d_core;
    let samples = bundle.unlabeled_with_truth().unwrap_or_default();
    Ok(samples
        .iter()
        .map(|s| Point {
            core: s.x[0],
            spurious: s.x[d_core],
            y: s.y,
            a: s.a.unwrap_or(0),
        })
        .collect())
}

#[derive(Debug, Serialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub budget: usize,
    pub admitted: Vec<usize>,
    pub minority_share: f64,
}

#[derive(Debug, Serialize)]
pub struct ThresholdComparison {
    pub groups: Vec<GroupId>,
    pub minority_group: GroupId,
    pub true_minority_share: f64,
    pub adaptive: Vec<TracePoint>,
    pub fixed: Vec<TracePoint>,
}

fn pick(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Trains the attribute predictor twice on the same data, once with
/// group-wise adaptive thresholds and once with a single fixed threshold.
pub fn threshold_comparison(p_maj: f64, tau: f64, iters: usize, seed: u64) -> Result<ThresholdComparison> {
    let bundle = dataset(p_maj, 400, 4000, seed)?;
    let groups = bundle.groups();
    let truth = bundle.unlabeled_with_truth().unwrap_or_default();
    let counts: Vec<usize> = groups
        .iter()
        .map(|g| truth.iter().filter(|s| s.group() == Some(*g)).count())
        .collect();
    let (mi, _) = counts
        .iter()
        .enumerate()
        .min_by_key(|&(i, c)| (*c, i))
        .expect("grid is nonempty");
    let minority_group = groups[mi];

    let train = pick(&bundle.labeled, &bundle.labeled_train);
    let holdout = pick(&bundle.labeled, &bundle.labeled_holdout);
    let run = |adaptive: bool| -> Result<Vec<TracePoint>> {
        let cfg = PseudoLabelConfig {
            tau_g_min: tau,
            max_iters: iters,
            recompute_every: (iters / 50).max(1),
            adaptive,
            ..Default::default()
        };
        let out = train_attr_predictor(&train, &bundle.unlabeled, &holdout, 2, 2, &cfg, seed)?;
        Ok(out
            .trace
            .iter()
            .map(|t| {
                let total = t.total_admitted();
                TracePoint {
                    iteration: t.iteration,
                    budget: t.budget,
                    admitted: groups.iter().map(|g| t.admitted(*g)).collect(),
                    minority_share: if total == 0 {
                        0.0
                    } else {
                        t.admitted(minority_group) as f64 / total as f64
                    },
                }
            })
            .collect())
    };
    Ok(ThresholdComparison {
        true_minority_share: counts[mi] as f64 / truth.len().max(1) as f64,
        adaptive: run(true)?,
        fixed: run(false)?,
        groups,
        minority_group,
    })
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub average: Vec<f64>,
    pub worst_group: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct RobustComparison {
    pub erm: Curve,
    pub dro: Curve,
}

/// Validation curves of ERM and Group DRO trained on the true groups.
pub fn robust_comparison(p_maj: f64, epochs: usize, eta_q: f64, seed: u64) -> Result<RobustComparison> {
    let bundle = dataset(p_maj, 400, 4000, seed)?;
    let groups = bundle.groups();
    let truth = bundle.unlabeled_with_truth().unwrap_or_default();
    let examples: Vec<RobustExample> = truth
        .iter()
        .filter_map(|s| s.group().map(|group| RobustExample { x: &s.x, y: s.y, group }))
        .collect();
    let mut cfg = RobustConfig {
        epochs,
        ..Default::default()
    };
    cfg.dro.eta_q = eta_q;
    let curve = |method| -> Result<Curve> {
        let out = train_robust(&examples, &bundle.labeled, 2, &groups, method, &cfg, seed)?;
        Ok(Curve {
            average: out.log.iter().map(|e| e.average_accuracy).collect(),
            worst_group: out.log.iter().map(|e| e.worst_group_accuracy).collect(),
        })
    };
    Ok(RobustComparison {
        erm: curve(RobustMethod::Erm)?,
        dro: curve(RobustMethod::Dro)?,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())))
}

#[wasm_bindgen(js_name = scatter)]
pub fn scatter_js(p_maj: f64, n: usize, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(scatter(p_maj, n, seed as u64))
}

#[wasm_bindgen(js_name = thresholdComparison)]
pub fn threshold_comparison_js(p_maj: f64, tau: f64, iters: usize, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(threshold_comparison(p_maj, tau, iters, seed as u64))
}

#[wasm_bindgen(js_name = robustComparison)]
pub fn robust_comparison_js(p_maj: f64, epochs: usize, eta_q: f64, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(robust_comparison(p_maj, epochs, eta_q, seed as u64))
}
