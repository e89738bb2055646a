//! Training records and their line-delimited JSON form.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::EvalReport;
use crate::loss::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean stage loss over the epoch's steps.
    pub loss: f64,
    /// Mean of each loss term before weighting (`main`, `aux`, `triplet`, `cosine`).
    pub components: BTreeMap<String, f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub total_miou: f64,
    /// Path of the saved checkpoint, once written.
    pub checkpoint: Option<String>,
}

/// Whether a record describes work done in this run or reused from a cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Trained,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: Stage,
    pub provenance: Provenance,
    pub epochs: Vec<EpochRecord>,
    pub evaluations: Vec<EvalSnapshot>,
    pub best: Option<BestSnapshot>,
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event<'a> {
    Start { stage: Stage, provenance: Provenance },
    Epoch(&'a EpochRecord),
    Eval(&'a EvalSnapshot),
    Best(&'a BestSnapshot),
}

impl TrainRecord {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            provenance: Provenance::Trained,
            epochs: Vec::new(),
            evaluations: Vec::new(),
            best: None,
        }
    }

    /// Marks a record as reused.
    pub fn cached(mut self) -> Self {
        self.provenance = Provenance::Cached;
        self
    }

    /// Loss components recorded in any epoch.
    pub fn component_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.epochs.iter().flat_map(|e| e.components.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }

    /// One JSON object per line: a `start` event, then epochs and evaluations
    /// in epoch order, then `best` if any.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut events = vec![Event::Start {
            stage: self.stage,
            provenance: self.provenance,
        }];
        let mut evals = self.evaluations.iter().peekable();
        for e in &self.epochs {
            events.push(Event::Epoch(e));
            while let Some(s) = evals.next_if(|s| s.epoch <= e.epoch) {
                events.push(Event::Eval(s));
            }
        }
        events.extend(evals.map(Event::Eval));
        events.extend(self.best.iter().map(Event::Best));
        let mut out = String::new();
        for ev in events {
            out.push_str(&serde_json::to_string(&ev)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }
}
