//! `report`: consolidates every `report.json` below a directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use gfss::eval::{gfs_seg_reference, EvalReport, ReferenceDataset};

use crate::CliError;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";

/// Mean metrics of one method directory at one shot count.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Method directory relative to the report root, e.g. `vanilla` or
    /// `sweep/lr/0.01/vanilla`.
    pub label: String,
    pub shots: usize,
    pub runs: usize,
    pub base_miou: Option<f64>,
    pub novel_miou: Option<f64>,
    pub total_miou: f64,
}

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if e.file_type()?.is_dir() {
            find_reports(&path, out)?;
        } else if e.file_name() == "report.json" {
            out.push(path);
        }
    }
    Ok(())
}

fn mean(vals: &[f64]) -> Option<f64> {
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Loads and aggregates the run reports below `root`. Runs are expected at
/// `<label>/<fold>/<shots>/<seed>/report.json`.
pub fn collect(root: &Path) -> Result<Vec<ReportRow>, CliError> {
    if !root.is_dir() {
        return Err(CliError::Empty(format!("{} is not a directory", root.display())));
    }
    let mut paths = Vec::new();
    find_reports(root, &mut paths).with_context(|| format!("scanning {}", root.display()))?;
    let mut groups: BTreeMap<(String, usize), Vec<EvalReport>> = BTreeMap::new();
    for path in paths {
        let rel = path.strip_prefix(root).expect("found below root");
        let parts: Vec<_> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        if parts.len() < 5 {
            continue;
        }
        let label = parts[..parts.len() - 4].join("/");
        let text = std::fs::read_to_string(&path)?;
        let report: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        groups.entry((label, report.shots)).or_default().push(report);
    }
    if groups.is_empty() {
        return Err(CliError::Empty(format!(
            "no run reports found below {}",
            root.display()
        )));
    }
    Ok(groups
        .into_iter()
        .map(|((label, shots), rs)| {
            let base: Vec<f64> = rs.iter().filter_map(|r| r.base_miou).collect();
            let novel: Vec<f64> = rs.iter().filter_map(|r| r.novel_miou).collect();
            let total: Vec<f64> = rs.iter().map(|r| r.total_miou).collect();
            ReportRow {
                label,
                shots,
                runs: rs.len(),
                base_miou: mean(&base),
                novel_miou: mean(&novel),
                total_miou: mean(&total).unwrap_or_default(),
            }
        })
        .collect())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn reference_rows() -> Vec<(&'static str, gfss::eval::ReferenceRow)> {
    [(ReferenceDataset::Pascal, "pascal"), (ReferenceDataset::Coco, "coco")]
        .into_iter()
        .flat_map(|(d, name)| gfs_seg_reference(d).into_iter().map(move |r| (name, r)))
        .collect()
}

/// CSV with full-precision computed rows followed by the cited reference rows.
pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("source,method,shots,runs,base_miou,novel_miou,total_miou\n");
    for r in rows {
        let _ = writeln!(
            s,
            "computed,{},{},{},{},{},{}",
            r.label,
            r.shots,
            r.runs,
            cell(r.base_miou),
            cell(r.novel_miou),
            r.total_miou
        );
    }
    for (dataset, r) in reference_rows() {
        let _ = writeln!(
            s,
            "{},{} ({dataset}),{},,{},{},{}",
            r.source, r.method, r.shots, r.base, r.novel, r.total
        );
    }
    s
}

/// Markdown with one table per method and a separate reference section.
pub fn render_markdown(rows: &[ReportRow]) -> String {
    let mut s = String::from("# Results\n");
    let mut labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    labels.dedup();
    for label in labels {
        let _ = write!(
            s,
            "\n## {label}\n\n| shots | runs | base mIoU | novel mIoU | total mIoU |\n|---|---|---|---|---|\n"
        );
        for r in rows.iter().filter(|r| r.label == label) {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                r.shots,
                r.runs,
                cell(r.base_miou),
                cell(r.novel_miou),
                r.total_miou
            );
        }
    }
    s.push_str("\n## GFS-Seg reference (from paper)\n\nPublished percentages, reproduced verbatim.\n\n");
    s.push_str("| dataset | shots | base | novel | total | source |\n|---|---|---|---|---|---|\n");
    for (dataset, r) in reference_rows() {
        let _ = writeln!(
            s,
            "| {dataset} | {} | {} | {} | {} | {} |",
            r.shots, r.base, r.novel, r.total, r.source
        );
    }
    s
}

/// Writes `report.csv` and `report.md` into `root` and returns the rows.
pub fn report(root: &Path) -> Result<Vec<ReportRow>, CliError> {
    let rows = collect(root)?;
    std::fs::write(root.join(REPORT_CSV), render_csv(&rows))?;
    std::fs::write(root.join(REPORT_MD), render_markdown(&rows))?;
    Ok(rows)
}
