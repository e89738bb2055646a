//! `run` and `sweep`: pipeline invocation and on-disk artifacts.
//!
//! Every (fold, shots, seed) run writes to `<root>/<method>/<fold>/<shots>/<seed>/`:
//! `report.json`, `stage1.jsonl`, `stage2.jsonl`, `episode.json`,
//! `model.safetensors` and, when enabled, `confidence.csv`. Each method
//! directory also gets `summary.csv` and `summary.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use gfss::eval::{
    cross_fold_average, saturation_summary, write_confidence_csv, CrossFoldSummary, EvalReport, SaturationTable,
};
use gfss::model::save_checkpoint;
use gfss::train::{run_pipeline, RunResult, Stage1Cache};
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::CliError;

pub const SUMMARY_CSV: &str = "summary.csv";
const SUMMARY_HEADER: &str = "method,fold,shots,seed,base_miou,novel_miou,total_miou";

/// Where one run's artifacts live.
pub fn run_dir(root: &Path, method: Method, fold: usize, shots: usize, seed: u64) -> PathBuf {
    root.join(method.name())
        .join(fold.to_string())
        .join(shots.to_string())
        .join(seed.to_string())
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

#[derive(Debug, Serialize)]
struct MethodSummary<'a> {
    method: Method,
    /// Mean over folds and seeds, per shot count.
    by_shots: BTreeMap<usize, CrossFoldSummary>,
    saturation: &'a SaturationTable,
}

/// Metrics of a finished experiment.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method_dir: PathBuf,
    pub reports: Vec<(usize, usize, u64, EvalReport)>,
    pub by_shots: BTreeMap<usize, CrossFoldSummary>,
}

fn write_run(dir: &Path, run: &mut RunResult) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let model = dir.join("model.safetensors");
    save_checkpoint(&model, &run.network, Some(&run.output_classes))?;
    if let Some(best) = run.stage2.best.as_mut() {
        best.checkpoint = Some("model.safetensors".into());
    }
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&run.report)?)?;
    run.stage1.write_jsonl(dir.join("stage1.jsonl"))?;
    run.stage2.write_jsonl(dir.join("stage2.jsonl"))?;
    std::fs::write(dir.join("episode.json"), serde_json::to_string_pretty(&run.selections)?)?;
    if let Some(stats) = &run.report.confidence_stats {
        write_confidence_csv(dir.join("confidence.csv"), &format!("shots={}", run.shots), stats)?;
    }
    Ok(())
}

/// Runs every (fold, shots, seed) of `cfg` below `root` and writes the
/// artifacts and summaries.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<RunOutcome, CliError> {
    let dataset = cfg.dataset.load().context("loading dataset")?;
    let first = dataset
        .train
        .first()
        .ok_or_else(|| CliError::Config("dataset has no training images".into()))?;
    let pipeline = cfg.pipeline_config((first.height(), first.width()));
    pipeline.network.validate()?;
    let mut cache = Stage1Cache::with_dir(root.join("stage1_cache"))?;
    let mut output = run_pipeline(&dataset, &pipeline, &mut cache)?;

    let method_dir = root.join(cfg.method.name());
    let mut reports = Vec::new();
    for run in &mut output.runs {
        let dir = run_dir(root, cfg.method, run.fold.fold_index, run.shots, run.seed);
        write_run(&dir, run).with_context(|| format!("writing {}", dir.display()))?;
        reports.push((run.fold.fold_index, run.shots, run.seed, run.report.clone()));
    }
    reports.sort_by_key(|(f, k, s, _)| (*f, *k, *s));

    let mut grouped: BTreeMap<usize, Vec<EvalReport>> = BTreeMap::new();
    for (_, shots, _, r) in &reports {
        grouped.entry(*shots).or_default().push(r.clone());
    }
    let mut by_shots = BTreeMap::new();
    for (shots, rs) in &grouped {
        by_shots.insert(*shots, cross_fold_average(rs)?);
    }

    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for (fold, shots, seed, r) in &reports {
        let _ = writeln!(
            csv,
            "{},{fold},{shots},{seed},{},{},{:.6}",
            cfg.method,
            fmt_metric(r.base_miou),
            fmt_metric(r.novel_miou),
            r.total_miou
        );
    }
    for (shots, s) in &by_shots {
        let _ = writeln!(
            csv,
            "{},mean,{shots},all,{},{},{:.6}",
            cfg.method,
            fmt_metric(s.base_miou),
            fmt_metric(s.novel_miou),
            s.total_miou
        );
    }
    std::fs::write(method_dir.join(SUMMARY_CSV), csv)?;

    let means: BTreeMap<usize, EvalReport> = by_shots
        .iter()
        .map(|(k, s)| {
            let r = EvalReport {
                per_class_iou: BTreeMap::new(),
                base_miou: s.base_miou,
                novel_miou: s.novel_miou,
                total_miou: s.total_miou,
                fold_index: 0,
                shots: *k,
                mode: pipeline.eval_mode,
                confidence_stats: None,
            };
            (*k, r)
        })
        .collect();
    let saturation = saturation_summary(&means);
    let summary = MethodSummary {
        method: cfg.method,
        by_shots: by_shots.clone(),
        saturation: &saturation,
    };
    std::fs::write(method_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(RunOutcome {
        method_dir,
        reports,
        by_shots,
    })
}

/// Sweepable settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    /// Learning rate of both stages.
    Lr,
    /// `base:ft` pairs of triplet weights.
    LambdaTriplet,
    Shots,
    RatioShift,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Lr => "lr",
            Axis::LambdaTriplet => "lambda_triplet",
            Axis::Shots => "shots",
            Axis::RatioShift => "ratio_shift",
        }
    }

    /// Returns `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig, CliError> {
        let bad = |what: &str| CliError::Config(format!("invalid {} value {value:?}: {what}", self.name()));
        let mut cfg = base.clone();
        match self {
            Axis::Lr => {
                let lr: f64 = value.parse().map_err(|_| bad("expected a number"))?;
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(bad("learning rate must be positive"));
                }
                cfg.stage1.lr = Some(lr);
                cfg.stage2.lr = Some(lr);
            }
            Axis::LambdaTriplet => {
                let (b, f) = value.split_once(':').ok_or_else(|| bad("expected base:ft"))?;
                let b: f64 = b.parse().map_err(|_| bad("expected numbers"))?;
                let f: f64 = f.parse().map_err(|_| bad("expected numbers"))?;
                if !(b >= 0.0 && f >= 0.0) {
                    return Err(bad("weights must be non-negative"));
                }
                cfg.weights.lambda_triplet_base = b;
                cfg.weights.lambda_triplet_ft = f;
            }
            Axis::Shots => {
                let k: usize = value.parse().map_err(|_| bad("expected a count"))?;
                if k == 0 {
                    return Err(bad("shots must be positive"));
                }
                cfg.shots = vec![k];
            }
            Axis::RatioShift => {
                cfg.ratio_shift = value.parse().map_err(|_| bad("expected an integer"))?;
            }
        }
        Ok(cfg)
    }
}

/// One sweep setting with mean metrics per shot count.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub by_shots: BTreeMap<usize, CrossFoldSummary>,
}

/// Runs `base` once per value under `<root>/sweep/<axis>/<value>/` and
/// writes `<root>/sweep/<axis>.csv` with one row per value.
pub fn sweep(base: &ExperimentConfig, axis: Axis, values: &[String], root: &Path) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("--values must list at least one setting".into()));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>, _>>()?;
    let sweep_root = root.join("sweep");
    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let dir = sweep_root.join(axis.name()).join(value);
        let out = run_experiment(cfg, &dir)?;
        rows.push(SweepRow {
            value: value.clone(),
            by_shots: out.by_shots,
        });
    }
    let shots: Vec<usize> = {
        let mut s: Vec<usize> = rows.iter().flat_map(|r| r.by_shots.keys().copied()).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let mut csv = String::from(axis.name());
    for k in &shots {
        let _ = write!(csv, ",base_{k},novel_{k},total_{k}");
    }
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.value);
        for k in &shots {
            match row.by_shots.get(k) {
                Some(s) => {
                    let _ = write!(
                        csv,
                        ",{},{},{:.6}",
                        fmt_metric(s.base_miou),
                        fmt_metric(s.novel_miou),
                        s.total_miou
                    );
                }
                None => csv.push_str(",,,"),
            }
        }
        csv.push('\n');
    }
    std::fs::create_dir_all(&sweep_root)?;
    std::fs::write(sweep_root.join(format!("{}.csv", axis.name())), csv)?;
    Ok(rows)
}
