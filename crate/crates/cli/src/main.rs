use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use ssa_core::config::{DatasetSpec, ExperimentConfig, FileDataset};
use ssa_core::io::{format_pseudo_labeled, format_samples, read_dataset, to_jsonl, write_text, Header, Role};
use ssa_core::metrics::pseudo_group_report;
use ssa_core::pipeline::{load_dataset, run_phase1, run_ssa_pipeline, run_ssl_imbalance};
use ssa_core::robust::{evaluate_model, train_robust, RobustExample};
use ssa_core::{GroupId, SsaError};

#[derive(Parser)]
#[command(
    name = "ssa",
    version,
    about = "Spurious-attribute pseudo-labeling and worst-group robust training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load a dataset and write it as text files.
    Generate(Common),
    /// Train the attribute predictors and write the pseudo-labeled set.
    Pseudolabel(Common),
    /// Robust training from dataset files.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training set (role labeled or pseudolabeled; the attribute column gives the group).
        #[arg(long)]
        train: PathBuf,
        /// Validation set with true groups, used for model selection.
        #[arg(long)]
        validation: PathBuf,
        /// Optional test set with true groups.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Full pipeline over all configured seeds.
    Pipeline(Common),
    /// Class-imbalanced semi-supervised comparison.
    SslImbalance(Common),
    /// Print the summary of a results directory or results.jsonl file.
    Report { path: PathBuf },
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
    detail: Option<Value>,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            detail: None,
        }
    }

    fn record(&self) -> Value {
        let mut v = json!({"record": "error", "kind": self.kind, "message": self.message});
        if let Some(d) = &self.detail {
            v["detail"] = d.clone();
        }
        v
    }
}

impl From<SsaError> for CliError {
    fn from(e: SsaError) -> Self {
        let kind = match &e {
            SsaError::InvalidConfig(_) => "config",
            SsaError::Io(_) => "io",
            SsaError::Parse { .. } => "parse",
            _ => "data",
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io", e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_config(c: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::from_path(path, &c.overrides)?,
        None => ExperimentConfig::from_toml_str("", &c.overrides)?,
    };
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(v: Value) {
    println!("{v}");
}

fn generate(c: &Common) -> CliResult<()> {
    let cfg = load_config(c)?;
    let seed = cfg.seeds[0];
    let bundle = load_dataset(&cfg, seed)?;
    let out = &cfg.output_dir;
    let header = |role| Header {
        dim: bundle.dim,
        n_classes: bundle.n_classes,
        n_attrs: bundle.n_attrs,
        role,
    };
    write_text(
        &out.join("labeled.txt"),
        &format_samples(header(Role::Labeled), &bundle.labeled)?,
    )?;
    write_text(
        &out.join("unlabeled.txt"),
        &format_samples(header(Role::Unlabeled), &bundle.unlabeled)?,
    )?;
    write_text(
        &out.join("test.txt"),
        &format_samples(header(Role::Labeled), &bundle.test)?,
    )?;
    let truth = bundle.unlabeled_with_truth();
    if let Some(t) = &truth {
        write_text(
            &out.join("unlabeled_truth.txt"),
            &format_samples(header(Role::Labeled), t)?,
        )?;
    }

    // a config that loads the written files back
    let abs = fs::canonicalize(out)?;
    let mut file_cfg = cfg.clone();
    file_cfg.dataset = DatasetSpec::File(FileDataset {
        labeled: abs.join("labeled.txt"),
        unlabeled: abs.join("unlabeled.txt"),
        test: abs.join("test.txt"),
        unlabeled_truth: truth.as_ref().map(|_| abs.join("unlabeled_truth.txt")),
    });
    file_cfg.labeled_fraction = 1.0;
    file_cfg.seeds = vec![seed];
    file_cfg.output_dir = abs.join("run");
    write_text(&out.join("dataset.toml"), &file_cfg.to_toml_string())?;

    emit(json!({
        "record": "generate",
        "seed": seed,
        "dir": out,
        "labeled": bundle.labeled.len(),
        "unlabeled": bundle.unlabeled.len(),
        "test": bundle.test.len(),
        "unlabeled_truth": truth.is_some(),
    }));
    Ok(())
}

fn pseudolabel(c: &Common) -> CliResult<()> {
    let cfg = load_config(c)?;
    let seed = cfg.seeds[0];
    let bundle = load_dataset(&cfg, seed)?;
    let p1 = run_phase1(&bundle, &cfg.pseudo, seed).map_err(|e| stage_error("phase1", e))?;
    let out = &cfg.output_dir;
    write_text(
        &out.join("pseudolabeled.txt"),
        &format_pseudo_labeled(bundle.dim, bundle.n_classes, bundle.n_attrs, &p1.labels),
    )?;
    let cfg_line = json!({"record": "config", "config": cfg});
    for (k, f) in p1.folds.iter().enumerate() {
        let lines = std::iter::once(cfg_line.clone()).chain(f.trace.iter().map(|t| json!(t)));
        write_text(&out.join(format!("trace_fold{k}.jsonl")), &to_jsonl(lines))?;
    }
    let report = match bundle.hidden_attributes() {
        Some(h) => Some(pseudo_group_report(&p1.labels, h.reveal())?),
        None => None,
    };
    let mut warnings: Vec<_> = p1.folds.iter().flat_map(|f| f.warnings.iter().cloned()).collect();
    warnings.dedup();
    emit(json!({
        "record": "pseudolabel",
        "seed": seed,
        "records": p1.labels.len(),
        "selected_iterations": p1.folds.iter().map(|f| f.selected_iteration).collect::<Vec<_>>(),
        "report": report,
        "warnings": warnings,
    }));
    Ok(())
}

fn stage_error(stage: &str, e: SsaError) -> CliError {
    let mut err = CliError::from(e);
    err.kind = "stage";
    err.detail = Some(json!({"stage": stage}));
    err
}

fn train(c: &Common, train_path: &Path, validation_path: &Path, test_path: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(c)?;
    let seed = cfg.seeds[0];
    let train_file = read_dataset(train_path)?;
    let validation = read_dataset(validation_path)?;
    if train_file.header.role == Role::Unlabeled {
        return Err(CliError::new("data", "training file carries no attribute column"));
    }
    if validation.header.role != Role::Labeled {
        return Err(CliError::new("data", "validation file must have role=labeled"));
    }
    let h = train_file.header;
    let groups = GroupId::grid(h.n_classes, h.n_attrs);
    let examples = train_file
        .samples
        .iter()
        .map(|s| {
            Ok(RobustExample {
                x: &s.x,
                y: s.y,
                group: s
                    .group()
                    .ok_or_else(|| CliError::new("data", "training sample without attribute"))?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let robust = train_robust(
        &examples,
        &validation.samples,
        h.n_classes,
        &groups,
        cfg.robust_method,
        &cfg.robust,
        seed,
    )
    .map_err(|e| stage_error("robust", e))?;

    let out = &cfg.output_dir;
    write_text(&out.join("model.ckpt"), &robust.model.to_checkpoint())?;
    let cfg_line = json!({"record": "config", "config": cfg});
    let lines = std::iter::once(cfg_line).chain(robust.log.iter().map(|e| json!(e)));
    write_text(&out.join("robust.jsonl"), &to_jsonl(lines))?;

    let test = match test_path {
        Some(p) => {
            let t = read_dataset(p)?;
            Some(evaluate_model(&robust.model, &t.samples, &groups)?)
        }
        None => None,
    };
    emit(json!({
        "record": "train",
        "method": cfg.robust_method,
        "selected_epoch": robust.selected_epoch,
        "test": test,
        "warnings": robust.warnings,
    }));
    Ok(())
}

fn partial_failure(failed: Vec<Value>, total: usize) -> CliResult<()> {
    if failed.is_empty() {
        return Ok(());
    }
    let mut err = CliError::new("stage", format!("{} of {} seeds failed", failed.len(), total));
    err.detail = Some(Value::Array(failed));
    Err(err)
}

fn pipeline(c: &Common) -> CliResult<()> {
    let cfg = load_config(c)?;
    let res = run_ssa_pipeline(&cfg)?;
    res.write(&cfg.output_dir)?;
    print!("{}", res.summary_table());
    let failed = res
        .runs
        .iter()
        .filter_map(|(s, r)| {
            r.as_ref()
                .err()
                .map(|e| json!({"seed": s, "stage": e.stage, "message": e.message}))
        })
        .collect();
    partial_failure(failed, res.runs.len())
}

fn ssl_imbalance(c: &Common) -> CliResult<()> {
    let cfg = load_config(c)?;
    let res = run_ssl_imbalance(&cfg)?;
    res.write(&cfg.output_dir)?;
    print!("{}", res.summary_table());
    let failed = res
        .runs
        .iter()
        .filter_map(|(s, r)| {
            r.as_ref()
                .err()
                .map(|e| json!({"seed": s, "stage": e.stage, "message": e.message}))
        })
        .collect();
    partial_failure(failed, res.runs.len())
}

fn fmt_mean_std(v: &Value) -> String {
    match (v["mean"].as_f64(), v["std"].as_f64()) {
        (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        _ => "-".into(),
    }
}

fn report(path: &Path) -> CliResult<()> {
    let file = if path.is_dir() {
        path.join("results.jsonl")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| CliError::new("io", format!("{}: {e}", file.display())))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Value>(l).map_err(|e| CliError::new("parse", format!("line {}: {e}", i + 1)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let summary = records
        .iter()
        .rev()
        .find(|r| r["record"] == "summary")
        .ok_or_else(|| CliError::new("parse", "no summary record"))?;

    for r in &records {
        match r["record"].as_str() {
            Some("stage") if r["stage"] == "test" => {
                let t = &r["report"];
                println!(
                    "seed {:<4} test average {:.2}  worst-group {:.2} ({},{})",
                    r["seed"],
                    100.0 * t["average_accuracy"].as_f64().unwrap_or(f64::NAN),
                    100.0 * t["worst_group_accuracy"].as_f64().unwrap_or(f64::NAN),
                    t["worst_group"]["y"],
                    t["worst_group"]["a"]
                );
            }
            Some("error") => println!("seed {:<4} failed in {}: {}", r["seed"], r["stage"], r["message"]),
            _ => {}
        }
    }
    if let Some(arms) = summary["arms"].as_array() {
        println!("{:<10} {:>16} {:>16}", "arm", "bACC", "GM");
        for a in arms {
            println!(
                "{:<10} {:>16} {:>16}",
                a["arm"].as_str().unwrap_or("?"),
                fmt_mean_std(&a["balanced_accuracy"]),
                fmt_mean_std(&a["geometric_mean"])
            );
        }
    } else {
        println!(
            "worst-group accuracy: {}",
            fmt_mean_std(&summary["worst_group_accuracy"])
        );
        println!("average accuracy:     {}", fmt_mean_std(&summary["average_accuracy"]));
    }
    println!("seeds ok: {}", summary["seeds_ok"]);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate(c) => generate(c),
        Command::Pseudolabel(c) => pseudolabel(c),
        Command::Train {
            common,
            train: t,
            validation,
            test,
        } => train(common, t, validation, test.as_deref()),
        Command::Pipeline(c) => pipeline(c),
        Command::SslImbalance(c) => ssl_imbalance(c),
        Command::Report { path } => report(path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                e.exit();
            }
            let err = CliError::new("usage", e.to_string().trim().to_string());
            eprintln!("{}", err.record());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}
