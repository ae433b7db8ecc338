//! End-to-end orchestration: data, Phase 1 over K folds, label
//! finalization, robust training, test evaluation, result emission. Also
//! the class-imbalanced semi-supervised comparison.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{DatasetSpec, ExperimentConfig, FileDataset};
use crate::datagen::{
    group_counts, make_imbalanced_ssl, make_spurious_dataset, DatasetBundle, GroupId, HiddenAttributes, Sample,
};
use crate::error::{invalid, Result, SsaError, Warning};
use crate::io::{read_dataset, to_jsonl, write_text, Role};
use crate::metrics::{class_recalls, geometric_mean, mean_std, pseudo_group_report, GroupReport, PseudoGroupReport};
use crate::pseudolabel::{finalize_labels, train_attr_predictor, AttrTrainOutput, PseudoLabelConfig, PseudoLabeled};
use crate::robust::{evaluate_model, train_robust, RobustExample, RobustOutput};
use crate::seed::derive_seed;

#[cfg(feature = "parallel")]
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// A failure attributed to one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

impl StageError {
    pub fn new(stage: &str, err: impl std::fmt::Display) -> Self {
        Self {
            stage: stage.to_string(),
            message: err.to_string(),
        }
    }
}

fn at(stage: &'static str) -> impl FnOnce(SsaError) -> StageError {
    move |e| StageError::new(stage, e)
}

fn load_file_dataset(f: &FileDataset, k_folds: usize, seed: u64) -> Result<DatasetBundle> {
    let labeled = read_dataset(&f.labeled)?;
    let unlabeled = read_dataset(&f.unlabeled)?;
    let test = read_dataset(&f.test)?;
    if labeled.header.role != Role::Labeled || test.header.role != Role::Labeled {
        return Err(invalid("labeled and test files must have role=labeled"));
    }
    let h = labeled.header;
    for other in [unlabeled.header, test.header] {
        if (other.dim, other.n_classes, other.n_attrs) != (h.dim, h.n_classes, h.n_attrs) {
            return Err(invalid("dataset files disagree on d, C or A"));
        }
    }
    let hidden = match &f.unlabeled_truth {
        Some(path) => {
            let truth = read_dataset(path)?;
            if truth.samples.len() != unlabeled.samples.len() {
                return Err(invalid("unlabeled_truth row count differs from unlabeled file"));
            }
            let attrs = truth
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| s.a.ok_or(SsaError::MissingAttribute(i)))
                .collect::<Result<Vec<_>>>()?;
            Some(HiddenAttributes::new(attrs))
        }
        None => None,
    };
    DatasetBundle::new(
        h.dim,
        h.n_classes,
        h.n_attrs,
        labeled.samples,
        unlabeled.samples,
        hidden,
        test.samples,
        k_folds,
        seed,
    )
}

/// Dataset for one run seed: generated datasets shift their generator seed
/// by `run_seed`; then the labeled set is subsampled and all splits drawn
/// from `run_seed`.
pub fn load_dataset(cfg: &ExperimentConfig, run_seed: u64) -> Result<DatasetBundle> {
    let mut bundle = match cfg.dataset.for_seed(run_seed) {
        DatasetSpec::Spurious(c) => make_spurious_dataset(&c)?,
        DatasetSpec::Imbalanced(c) => make_imbalanced_ssl(&c)?,
        DatasetSpec::File(f) => load_file_dataset(&f, cfg.k_folds, run_seed)?,
    };
    bundle.subsample_labeled(cfg.labeled_fraction, cfg.k_folds, run_seed)?;
    Ok(bundle)
}

fn select(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

#[derive(Debug, Clone)]
pub struct Phase1Output {
    pub folds: Vec<AttrTrainOutput>,
    pub labels: Vec<PseudoLabeled>,
}

/// Trains one attribute predictor per unlabeled fold (on every other fold;
/// on everything when there is a single fold) and labels each fold with the
/// model that did not see it.
pub fn run_phase1(bundle: &DatasetBundle, cfg: &PseudoLabelConfig, seed: u64) -> Result<Phase1Output> {
    let train = select(&bundle.labeled, &bundle.labeled_train);
    let holdout = select(&bundle.labeled, &bundle.labeled_holdout);
    let k = bundle.unlabeled_folds.len();
    let folds = par_map(k, |fold| {
        let unlabeled: Vec<Sample> = if k == 1 {
            bundle.unlabeled.clone()
        } else {
            bundle
                .unlabeled_folds
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != fold)
                .flat_map(|(_, idx)| idx.iter().map(|&i| bundle.unlabeled[i].clone()))
                .collect()
        };
        train_attr_predictor(
            &train,
            &unlabeled,
            &holdout,
            bundle.n_classes,
            bundle.n_attrs,
            cfg,
            derive_seed(seed, 1000 + fold as u64),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let models: Vec<_> = folds.iter().map(|f| f.model.clone()).collect();
    let labels = finalize_labels(&models, bundle)?;
    Ok(Phase1Output { folds, labels })
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub n_labeled: usize,
    pub n_labeled_train: usize,
    pub n_labeled_holdout: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub k_folds: usize,
    pub labeled_group_counts: Vec<(GroupId, usize)>,
}

impl DataSummary {
    fn of(b: &DatasetBundle) -> Self {
        Self {
            n_labeled: b.labeled.len(),
            n_labeled_train: b.labeled_train.len(),
            n_labeled_holdout: b.labeled_holdout.len(),
            n_unlabeled: b.unlabeled.len(),
            n_test: b.test.len(),
            k_folds: b.unlabeled_folds.len(),
            labeled_group_counts: group_counts(&b.labeled).into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub data: DataSummary,
    pub phase1: Option<Phase1Output>,
    pub pseudo_report: Option<PseudoGroupReport>,
    pub robust: RobustOutput,
    pub test: GroupReport,
    pub warnings: Vec<Warning>,
}

type TrainRecord = (Vec<f64>, usize, GroupId);

pub type SeedRun = std::result::Result<SeedOutcome, StageError>;

pub fn run_ssa_seed(cfg: &ExperimentConfig, seed: u64) -> SeedRun {
    let bundle = load_dataset(cfg, seed).map_err(at("data"))?;
    let mut warnings = bundle.warnings.clone();
    let groups = bundle.groups();

    let (phase1, train_records, pseudo_report): (Option<Phase1Output>, Vec<TrainRecord>, _) =
        if cfg.ground_truth_attributes {
            let truth = bundle
                .unlabeled_with_truth()
                .ok_or_else(|| StageError::new("data", "ground-truth attributes requested but unavailable"))?;
            let recs = truth
                .into_iter()
                .map(|s| {
                    let g = s.group().expect("revealed");
                    (s.x, s.y, g)
                })
                .collect();
            (None, recs, None)
        } else {
            let p1 = run_phase1(&bundle, &cfg.pseudo, seed).map_err(at("phase1"))?;
            for f in &p1.folds {
                warnings.extend(f.warnings.iter().cloned());
            }
            let report = match bundle.hidden_attributes() {
                Some(h) => Some(pseudo_group_report(&p1.labels, h.reveal()).map_err(at("pseudo_labels"))?),
                None => None,
            };
            let recs = p1.labels.iter().map(|r| (r.x.clone(), r.y, r.pseudo_group())).collect();
            (Some(p1), recs, report)
        };

    let examples: Vec<RobustExample> = train_records
        .iter()
        .map(|(x, y, g)| RobustExample { x, y: *y, group: *g })
        .collect();
    let robust = train_robust(
        &examples,
        &bundle.labeled,
        bundle.n_classes,
        &groups,
        cfg.robust_method,
        &cfg.robust,
        derive_seed(seed, 2000),
    )
    .map_err(at("robust"))?;
    warnings.extend(robust.warnings.iter().cloned());
    let test = evaluate_model(&robust.model, &bundle.test, &groups).map_err(at("test"))?;
    warnings.extend(test.warnings.iter().cloned());

    Ok(SeedOutcome {
        seed,
        data: DataSummary::of(&bundle),
        phase1,
        pseudo_report,
        robust,
        test,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub config: ExperimentConfig,
    pub runs: Vec<(u64, SeedRun)>,
}

impl PipelineResult {
    pub fn ok(&self) -> impl Iterator<Item = &SeedOutcome> {
        self.runs.iter().filter_map(|(_, r)| r.as_ref().ok())
    }

    pub fn worst_group(&self) -> MeanStd {
        MeanStd::of(&self.ok().map(|o| o.test.worst_group_accuracy).collect::<Vec<_>>())
    }

    pub fn average(&self) -> MeanStd {
        MeanStd::of(&self.ok().map(|o| o.test.average_accuracy).collect::<Vec<_>>())
    }

    /// Machine-readable records: config, one per (seed, stage), warnings,
    /// errors, summary.
    pub fn records(&self) -> Vec<Value> {
        let mut out = vec![json!({"record": "config", "config": self.config})];
        for (seed, run) in &self.runs {
            match run {
                Err(e) => out.push(json!({"record": "error", "seed": seed, "stage": e.stage, "message": e.message})),
                Ok(o) => out.extend(seed_records(o, &self.config)),
            }
        }
        out.push(json!({
            "record": "summary",
            "seeds": self.runs.iter().map(|(s, _)| s).collect::<Vec<_>>(),
            "seeds_ok": self.ok().count(),
            "worst_group_accuracy": self.worst_group(),
            "average_accuracy": self.average(),
        }));
        out
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:<8} {:>10} {:>11} {:>12} {:>10}",
            "seed", "status", "test_avg", "test_worst", "worst_group", "attr_acc"
        );
        for (seed, run) in &self.runs {
            match run {
                Ok(o) => {
                    let attr = o
                        .pseudo_report
                        .as_ref()
                        .map(|r| format!("{:.4}", r.attribute_accuracy))
                        .unwrap_or_else(|| "-".into());
                    let _ = writeln!(
                        s,
                        "{:<6} {:<8} {:>10.4} {:>11.4} {:>12} {:>10}",
                        seed,
                        "ok",
                        o.test.average_accuracy,
                        o.test.worst_group_accuracy,
                        o.test.worst_group.to_string(),
                        attr
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{:<6} {:<8} {}: {}", seed, "error", e.stage, e.message);
                }
            }
        }
        let (w, a) = (self.worst_group(), self.average());
        let _ = writeln!(s, "worst-group accuracy: {:.4} ± {:.4}", w.mean, w.std);
        let _ = writeln!(s, "average accuracy:     {:.4} ± {:.4}", a.mean, a.std);
        s
    }

    /// Writes `results.jsonl`, `summary.txt`, and per-seed Phase 1 traces
    /// and robust-training logs into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let cfg_line = json!({"record": "config", "config": self.config});
        write_text(&dir.join("results.jsonl"), &to_jsonl(self.records()))?;
        let summary = format!(
            "{}\n# resolved config\n{}",
            self.summary_table(),
            commented(&self.config.to_toml_string())
        );
        write_text(&dir.join("summary.txt"), &summary)?;
        for o in self.ok() {
            if let Some(p1) = &o.phase1 {
                for (k, f) in p1.folds.iter().enumerate() {
                    let lines = std::iter::once(cfg_line.clone()).chain(f.trace.iter().map(|t| json!(t)));
                    write_text(
                        &dir.join(format!("trace_seed{}_fold{}.jsonl", o.seed, k)),
                        &to_jsonl(lines),
                    )?;
                }
            }
            let lines = std::iter::once(cfg_line.clone()).chain(o.robust.log.iter().map(|e| json!(e)));
            write_text(&dir.join(format!("robust_seed{}.jsonl", o.seed)), &to_jsonl(lines))?;
        }
        Ok(())
    }
}

fn commented(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

fn seed_records(o: &SeedOutcome, cfg: &ExperimentConfig) -> Vec<Value> {
    let stage = |name: &str, body: Value| {
        let mut v = json!({"record": "stage", "seed": o.seed, "stage": name});
        if let (Value::Object(m), Value::Object(b)) = (&mut v, body) {
            m.extend(b);
        }
        v
    };
    let mut out = vec![stage("data", json!(o.data))];
    if let Some(p1) = &o.phase1 {
        for (k, f) in p1.folds.iter().enumerate() {
            let last = f.trace.last();
            out.push(stage(
                "phase1",
                json!({
                    "fold": k,
                    "selected_iteration": f.selected_iteration,
                    "holdout_worst_group_accuracy": f.selected_holdout_wga,
                    "recomputations": f.trace.len(),
                    "balance_violations": f.trace.iter().map(|t| t.balance_violations).sum::<usize>(),
                    "final_g_min": last.map(|t| t.g_min),
                    "final_budget": last.map(|t| t.budget),
                    "final_admitted": last.map(|t| t.groups.iter().map(|g| (g.group, g.admitted)).collect::<Vec<_>>()),
                }),
            ));
        }
    }
    if let Some(r) = &o.pseudo_report {
        out.push(stage("pseudo_labels", json!({"report": r})));
    }
    let last = o.robust.log.iter().find(|e| e.epoch == o.robust.selected_epoch);
    out.push(stage(
        "robust",
        json!({
            "method": cfg.robust_method,
            "ground_truth_attributes": cfg.ground_truth_attributes,
            "selected_epoch": o.robust.selected_epoch,
            "validation_worst_group_accuracy": last.map(|e| e.worst_group_accuracy),
            "validation_average_accuracy": last.map(|e| e.average_accuracy),
            "final_q": o.robust.dro.as_ref().map(|d| d.q.clone()),
            "skipped_anchors": o.robust.skipped_anchors,
        }),
    ));
    out.push(stage("test", json!({"report": o.test})));
    for w in &o.warnings {
        out.push(json!({"record": "warning", "seed": o.seed, "stage": w.stage, "message": w.message}));
    }
    out
}

pub fn run_ssa_pipeline(cfg: &ExperimentConfig) -> Result<PipelineResult> {
    cfg.validate()?;
    let mut runs: Vec<(u64, SeedRun)> = par_map(cfg.seeds.len(), |i| (cfg.seeds[i], run_ssa_seed(cfg, cfg.seeds[i])));
    runs.sort_by_key(|(s, _)| *s);
    Ok(PipelineResult {
        config: cfg.clone(),
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SslArm {
    /// Labeled data only.
    Vanilla,
    /// One confidence threshold for every class.
    Fixed,
    /// Group-wise adaptive thresholds.
    Adaptive,
    /// Every unlabeled label revealed.
    Oracle,
}

impl SslArm {
    pub const ALL: [SslArm; 4] = [SslArm::Vanilla, SslArm::Fixed, SslArm::Adaptive, SslArm::Oracle];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslArmResult {
    pub arm: SslArm,
    pub balanced_accuracy: f64,
    pub geometric_mean: f64,
    pub recalls: Vec<f64>,
    /// Pseudo-labels admitted per class at the last threshold recomputation.
    pub final_admitted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SslSeedOutcome {
    pub seed: u64,
    pub arms: Vec<SslArmResult>,
    pub warnings: Vec<Warning>,
}

impl SslSeedOutcome {
    pub fn arm(&self, arm: SslArm) -> &SslArmResult {
        self.arms.iter().find(|a| a.arm == arm).expect("every arm is run")
    }
}

/// Trains one arm on the whole labeled set (no holdout selection: the
/// final iterate is evaluated) and scores it on the balanced test set.
pub fn run_ssl_arm(
    bundle: &DatasetBundle,
    cfg: &PseudoLabelConfig,
    arm: SslArm,
    seed: u64,
) -> Result<(SslArmResult, Vec<Warning>)> {
    let mut labeled = bundle.labeled.clone();
    let unlabeled: Vec<Sample> = match arm {
        SslArm::Vanilla => Vec::new(),
        SslArm::Fixed | SslArm::Adaptive => bundle.unlabeled.clone(),
        SslArm::Oracle => {
            labeled.extend(
                bundle
                    .unlabeled_with_truth()
                    .ok_or_else(|| invalid("oracle arm needs the hidden unlabeled classes"))?,
            );
            Vec::new()
        }
    };
    let arm_cfg = PseudoLabelConfig {
        adaptive: arm != SslArm::Fixed,
        ..cfg.clone()
    };
    let out = train_attr_predictor(
        &labeled,
        &unlabeled,
        &[],
        bundle.n_classes,
        bundle.n_attrs,
        &arm_cfg,
        seed,
    )?;
    let preds = bundle
        .test
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((s.a.ok_or(SsaError::MissingAttribute(i))?, out.model.predict(&s.x)?)))
        .collect::<Result<Vec<_>>>()?;
    let recalls = class_recalls(&preds, bundle.n_attrs)?;
    let final_admitted = match out.trace.last() {
        Some(t) => (0..bundle.n_attrs).map(|c| t.admitted(GroupId::new(0, c))).collect(),
        None => vec![0; bundle.n_attrs],
    };
    let result = SslArmResult {
        arm,
        balanced_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        geometric_mean: geometric_mean(&recalls),
        recalls,
        final_admitted,
    };
    Ok((result, out.warnings))
}

pub type SslSeedRun = std::result::Result<SslSeedOutcome, StageError>;

pub fn run_ssl_seed(cfg: &ExperimentConfig, seed: u64) -> SslSeedRun {
    let bundle = load_dataset(cfg, seed).map_err(at("data"))?;
    let arms = par_map(SslArm::ALL.len(), |i| {
        run_ssl_arm(&bundle, &cfg.pseudo, SslArm::ALL[i], derive_seed(seed, 3000))
    });
    let mut out = SslSeedOutcome {
        seed,
        arms: Vec::new(),
        warnings: bundle.warnings.clone(),
    };
    for r in arms {
        let (res, w) = r.map_err(at("ssl_arm"))?;
        out.arms.push(res);
        out.warnings.extend(w);
    }
    out.warnings
        .sort_by(|a, b| (&a.stage, &a.message).cmp(&(&b.stage, &b.message)));
    out.warnings.dedup();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SslResult {
    pub config: ExperimentConfig,
    pub runs: Vec<(u64, SslSeedRun)>,
}

impl SslResult {
    pub fn ok(&self) -> impl Iterator<Item = &SslSeedOutcome> {
        self.runs.iter().filter_map(|(_, r)| r.as_ref().ok())
    }

    pub fn arm_summary(&self, arm: SslArm) -> (MeanStd, MeanStd) {
        let b: Vec<f64> = self.ok().map(|o| o.arm(arm).balanced_accuracy).collect();
        let g: Vec<f64> = self.ok().map(|o| o.arm(arm).geometric_mean).collect();
        (MeanStd::of(&b), MeanStd::of(&g))
    }

    pub fn records(&self) -> Vec<Value> {
        let mut out = vec![json!({"record": "config", "config": self.config})];
        for (seed, run) in &self.runs {
            match run {
                Err(e) => out.push(json!({"record": "error", "seed": seed, "stage": e.stage, "message": e.message})),
                Ok(o) => {
                    for a in &o.arms {
                        out.push(json!({"record": "stage", "seed": seed, "stage": "ssl_arm", "result": a}));
                    }
                    for w in &o.warnings {
                        out.push(json!({"record": "warning", "seed": seed, "stage": w.stage, "message": w.message}));
                    }
                }
            }
        }
        let arms: Vec<Value> = SslArm::ALL
            .iter()
            .map(|&arm| {
                let (b, g) = self.arm_summary(arm);
                json!({"arm": arm, "balanced_accuracy": b, "geometric_mean": g})
            })
            .collect();
        out.push(json!({"record": "summary", "seeds_ok": self.ok().count(), "arms": arms}));
        out
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>18} {:>18}", "arm", "bACC", "GM");
        for arm in SslArm::ALL {
            let (b, g) = self.arm_summary(arm);
            let name = serde_json::to_value(arm).expect("arm serializes");
            let _ = writeln!(
                s,
                "{:<10} {:>9.2} ± {:<6.2} {:>9.2} ± {:<6.2}",
                name.as_str().unwrap_or_default(),
                100.0 * b.mean,
                100.0 * b.std,
                100.0 * g.mean,
                100.0 * g.std
            );
        }
        for (seed, run) in &self.runs {
            if let Err(e) = run {
                let _ = writeln!(s, "seed {seed} failed in {}: {}", e.stage, e.message);
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("results.jsonl"), &to_jsonl(self.records()))?;
        let summary = format!(
            "{}\n# resolved config\n{}",
            self.summary_table(),
            commented(&self.config.to_toml_string())
        );
        write_text(&dir.join("summary.txt"), &summary)
    }
}

pub fn run_ssl_imbalance(cfg: &ExperimentConfig) -> Result<SslResult> {
    cfg.validate()?;
    if !matches!(cfg.dataset, DatasetSpec::Imbalanced(_)) {
        return Err(invalid("ssl-imbalance needs dataset.kind = \"imbalanced\""));
    }
    let mut runs: Vec<(u64, SslSeedRun)> =
        par_map(cfg.seeds.len(), |i| (cfg.seeds[i], run_ssl_seed(cfg, cfg.seeds[i])));
    runs.sort_by_key(|(s, _)| *s);
    Ok(SslResult {
        config: cfg.clone(),
        runs,
    })
}
