//! Cross-fold averages, shot-saturation tables and cited reference rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold_index: usize,
    pub shots: usize,
    pub base_miou: Option<f64>,
    pub novel_miou: Option<f64>,
    pub total_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFoldSummary {
    pub folds: Vec<FoldRow>,
    pub base_miou: Option<f64>,
    pub novel_miou: Option<f64>,
    pub total_miou: f64,
}

fn mean(vals: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in vals {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Arithmetic mean of the fold metrics plus the per-fold table. Undefined
/// base or novel values are skipped.
pub fn cross_fold_average(reports: &[EvalReport]) -> Result<CrossFoldSummary> {
    if reports.is_empty() {
        return Err(Error::Eval("no reports to average".into()));
    }
    let folds: Vec<FoldRow> = reports
        .iter()
        .map(|r| FoldRow {
            fold_index: r.fold_index,
            shots: r.shots,
            base_miou: r.base_miou,
            novel_miou: r.novel_miou,
            total_miou: r.total_miou,
        })
        .collect();
    Ok(CrossFoldSummary {
        base_miou: mean(reports.iter().filter_map(|r| r.base_miou)),
        novel_miou: mean(reports.iter().filter_map(|r| r.novel_miou)),
        total_miou: mean(reports.iter().map(|r| r.total_miou)).unwrap_or_default(),
        folds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationRow {
    pub shots: usize,
    pub base_miou: Option<f64>,
    pub novel_miou: Option<f64>,
    pub total_miou: f64,
    /// Change from the previous (smaller) shot count.
    pub delta_base: Option<f64>,
    pub delta_novel: Option<f64>,
    pub delta_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationTable {
    pub rows: Vec<SaturationRow>,
}

/// Metrics per shot count, with successive deltas.
pub fn saturation_summary(by_shots: &BTreeMap<usize, EvalReport>) -> SaturationTable {
    let mut rows: Vec<SaturationRow> = Vec::with_capacity(by_shots.len());
    for (&shots, r) in by_shots {
        let prev = rows.last();
        let diff = |now: Option<f64>, before: Option<Option<f64>>| match (now, before.flatten()) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        rows.push(SaturationRow {
            shots,
            base_miou: r.base_miou,
            novel_miou: r.novel_miou,
            total_miou: r.total_miou,
            delta_base: diff(r.base_miou, prev.map(|p| p.base_miou)),
            delta_novel: diff(r.novel_miou, prev.map(|p| p.novel_miou)),
            delta_total: diff(Some(r.total_miou), prev.map(|p| Some(p.total_miou))),
        });
    }
    SaturationTable { rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceDataset {
    Pascal,
    Coco,
}

/// A published result, rendered verbatim and never recomputed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub method: &'static str,
    pub source: &'static str,
    pub dataset: ReferenceDataset,
    pub shots: usize,
    /// Percentages, as published.
    pub base: f64,
    pub novel: f64,
    pub total: f64,
}

/// GFS-Seg results on PASCAL-5i and COCO-20i (1, 5 and 10 shots).
pub fn gfs_seg_reference(dataset: ReferenceDataset) -> Vec<ReferenceRow> {
    let table: [(usize, f64, f64, f64); 3] = match dataset {
        ReferenceDataset::Pascal => [
            (1, 65.48, 18.85, 54.38),
            (5, 66.14, 22.41, 55.72),
            (10, 64.52, 23.19, 54.68),
        ],
        ReferenceDataset::Coco => [
            (1, 44.61, 7.05, 35.46),
            (5, 45.24, 11.05, 36.80),
            (10, 42.81, 10.39, 34.81),
        ],
    };
    table
        .into_iter()
        .map(|(shots, base, novel, total)| ReferenceRow {
            method: "GFS-Seg",
            source: "from paper",
            dataset,
            shots,
            base,
            novel,
            total,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EvalMode;

    fn report(fold: usize, shots: usize, total: f64) -> EvalReport {
        EvalReport {
            per_class_iou: BTreeMap::new(),
            base_miou: Some(total),
            novel_miou: Some(total),
            total_miou: total,
            fold_index: fold,
            shots,
            mode: EvalMode::Generalized,
            confidence_stats: None,
        }
    }

    #[test]
    fn two_fold_average() {
        let s = cross_fold_average(&[report(0, 1, 0.6), report(1, 1, 0.8)]).unwrap();
        assert!((s.total_miou - 0.7).abs() < 1e-12);
        assert_eq!(s.folds.len(), 2);
        assert!(cross_fold_average(&[]).is_err());
    }

    #[test]
    fn deltas() {
        let single = saturation_summary(&BTreeMap::from([(1, report(0, 1, 0.4))]));
        assert_eq!(single.rows[0].delta_total, None);
        let two = saturation_summary(&BTreeMap::from([(1, report(0, 1, 0.4)), (10, report(0, 10, 0.6))]));
        assert!((two.rows[1].delta_total.unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn cited_rows() {
        let p = gfs_seg_reference(ReferenceDataset::Pascal);
        assert_eq!((p[0].base, p[0].novel, p[0].total), (65.48, 18.85, 54.38));
        assert_eq!(p[0].source, "from paper");
        let c = gfs_seg_reference(ReferenceDataset::Coco);
        assert_eq!((c[2].base, c[2].novel, c[2].total), (42.81, 10.39, 34.81));
    }
}
