//! Datasets, cross-validation folds and K-shot episodes.
//!
//! Class indices are plain `usize` values in `0..=num_classes`, where `0` is
//! background. Label grids store them as `u8`, with a dataset-specific ignore
//! sentinel for pixels that take part in neither training nor evaluation.

mod io;
mod synthetic;

pub use io::{load_dataset, write_dataset, Manifest};
pub use synthetic::{generate_synthetic_dataset, ShapeKind, SyntheticParams};

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::seed;

/// Default on-disk ignore label.
pub const IGNORE_LABEL: u8 = 255;

/// One image together with its per-pixel label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `channels x height x width`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `height x width` class indices or the ignore sentinel.
    pub labels: Array2<u8>,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Array3<f32>, labels: Array2<u8>) -> Result<Self> {
        let id = id.into();
        let (_, h, w) = image.dim();
        if labels.dim() != (h, w) {
            return Err(domain(format!(
                "sample {id}: label grid {:?} does not match image {h}x{w}",
                labels.dim()
            )));
        }
        Ok(Self { id, image, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    /// Distinct non-ignore classes present in the label map.
    pub fn present_classes(&self, ignore: u8) -> BTreeSet<usize> {
        let mut seen = [false; 256];
        for &v in self.labels.iter() {
            seen[v as usize] = true;
        }
        seen[ignore as usize] = false;
        (0..256).filter(|&c| seen[c]).collect()
    }

    pub fn contains_class(&self, class: usize, ignore: u8) -> bool {
        class != ignore as usize && self.labels.iter().any(|&v| v as usize == class)
    }
}

/// How fold class sets are laid out over the object-class indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldScheme {
    /// Fold `i` holds `{n*i + j : j in 1..=n}` with `n = num_classes / num_folds`
    /// (the PASCAL-5i layout).
    Contiguous,
    /// Fold `i` holds `{f*j - (f-1) + i : j in 1..=n}` with `f = num_folds`
    /// (the COCO-20i layout).
    Interleaved,
}

/// Dataset-level constants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    /// Object classes, excluding background.
    pub num_classes: usize,
    pub background_index: usize,
    pub ignore_value: u8,
    pub num_folds: usize,
    pub fold_scheme: FoldScheme,
}

impl DatasetSpec {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        ignore_value: u8,
        num_folds: usize,
        fold_scheme: FoldScheme,
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            num_classes,
            background_index: 0,
            ignore_value,
            num_folds,
            fold_scheme,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// PASCAL-5i: 20 object classes in four contiguous folds.
    pub fn pascal_voc() -> Self {
        Self::new("pascal-5i", 20, IGNORE_LABEL, 4, FoldScheme::Contiguous).expect("static spec is valid")
    }

    /// COCO-20i: 80 object classes in four interleaved folds.
    pub fn coco() -> Self {
        Self::new("coco-20i", 80, IGNORE_LABEL, 4, FoldScheme::Interleaved).expect("static spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.background_index != 0 {
            return Err(domain("background index must be 0"));
        }
        if (self.ignore_value as usize) <= self.num_classes {
            return Err(domain(format!(
                "ignore value {} collides with class range 0..={}",
                self.ignore_value, self.num_classes
            )));
        }
        if self.num_folds == 0 || !self.num_classes.is_multiple_of(self.num_folds) {
            return Err(domain(format!(
                "{} classes cannot be split evenly into {} folds",
                self.num_classes, self.num_folds
            )));
        }
        Ok(())
    }

    /// Every class index including background.
    pub fn all_classes(&self) -> impl Iterator<Item = usize> {
        0..=self.num_classes
    }

    /// Novel classes of `fold_index` according to the fold scheme.
    pub fn fold_classes(&self, fold_index: usize) -> Result<Vec<usize>> {
        if fold_index >= self.num_folds {
            return Err(domain(format!("fold index {fold_index} outside 0..{}", self.num_folds)));
        }
        let per_fold = self.num_classes / self.num_folds;
        let f = self.num_folds;
        let classes = (1..=per_fold)
            .map(|j| match self.fold_scheme {
                FoldScheme::Contiguous => per_fold * fold_index + j,
                FoldScheme::Interleaved => f * j - (f - 1) + fold_index,
            })
            .collect();
        Ok(classes)
    }
}

/// Novel classes of PASCAL-5i fold `fold_index`: `{5i + j : j = 1..5}`.
pub fn pascal_fold_classes(fold_index: usize) -> Result<Vec<usize>> {
    DatasetSpec::pascal_voc().fold_classes(fold_index)
}

/// Novel classes of COCO-20i fold `fold_index`: `{4j - 3 + i : j = 1..20}`.
pub fn coco_fold_classes(fold_index: usize) -> Result<Vec<usize>> {
    DatasetSpec::coco().fold_classes(fold_index)
}

/// Partition of the class indices into base and novel sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_index: usize,
    /// Sorted; always contains background.
    pub base_classes: Vec<usize>,
    /// Sorted; never contains background.
    pub novel_classes: Vec<usize>,
    pub ratio_shift: i32,
}

impl FoldSpec {
    /// `C_b ∪ C_n`, sorted.
    pub fn all_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.base_classes.iter().chain(&self.novel_classes).copied().collect();
        all.sort_unstable();
        all
    }

    pub fn is_novel(&self, class: usize) -> bool {
        self.novel_classes.binary_search(&class).is_ok()
    }

    pub fn is_base(&self, class: usize) -> bool {
        self.base_classes.binary_search(&class).is_ok()
    }
}

/// Builds the fold partition, optionally moving `|ratio_shift|` classes
/// between the sets.
///
/// A negative shift moves the lowest-indexed novel classes into the base set;
/// a positive shift moves the lowest-indexed non-background base classes into
/// the novel set.
pub fn make_fold(spec: &DatasetSpec, fold_index: usize, ratio_shift: i32) -> Result<FoldSpec> {
    let mut novel = spec.fold_classes(fold_index)?;
    let novel_set: BTreeSet<usize> = novel.iter().copied().collect();
    let mut base: Vec<usize> = spec.all_classes().filter(|c| !novel_set.contains(c)).collect();

    let shift = ratio_shift.unsigned_abs() as usize;
    if shift + 1 > novel.len() {
        return Err(domain(format!(
            "ratio shift {ratio_shift} must not exceed the novel class count minus one (fold has {})",
            novel.len()
        )));
    }
    if ratio_shift < 0 {
        let moved: Vec<usize> = novel.drain(..shift).collect();
        base.extend(moved);
    } else if ratio_shift > 0 {
        let movable: Vec<usize> = base
            .iter()
            .copied()
            .filter(|&c| c != spec.background_index)
            .take(shift)
            .collect();
        if movable.len() < shift {
            return Err(domain(format!(
                "ratio shift {ratio_shift} exceeds available base classes"
            )));
        }
        base.retain(|c| !movable.contains(c));
        novel.extend(movable);
    }
    base.sort_unstable();
    novel.sort_unstable();
    Ok(FoldSpec {
        fold_index,
        base_classes: base,
        novel_classes: novel,
        ratio_shift,
    })
}

/// Support images drawn for one class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassShots {
    pub class: usize,
    pub sample_ids: Vec<String>,
}

/// A K-shot fine-tuning set plus the evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub shots: usize,
    /// Concatenation of the per-class draws, in class order. One image may
    /// appear several times if it was drawn for several classes.
    pub support: Vec<SegmentationSample>,
    pub selections: Vec<ClassShots>,
    pub eval_set: Vec<SegmentationSample>,
    pub seed: u64,
}

/// Draws `shots` images containing each class of `fold` uniformly without
/// replacement (fewer when fewer exist).
pub fn sample_episode(
    train: &[SegmentationSample],
    eval_set: &[SegmentationSample],
    fold: &FoldSpec,
    ignore: u8,
    shots: usize,
    seed: u64,
) -> Result<Episode> {
    if train.is_empty() {
        return Err(domain("cannot sample an episode from an empty dataset"));
    }
    if shots == 0 {
        return Err(domain("shots must be at least 1"));
    }
    let presence: Vec<BTreeSet<usize>> = train.iter().map(|s| s.present_classes(ignore)).collect();
    let mut rng = seed::rng(seed, "episode");
    let mut support = Vec::new();
    let mut selections = Vec::new();
    for class in fold.all_classes() {
        let containing: Vec<usize> = presence
            .iter()
            .enumerate()
            .filter(|(_, p)| p.contains(&class))
            .map(|(i, _)| i)
            .collect();
        if containing.is_empty() {
            return Err(domain(format!("class {class} has no containing samples")));
        }
        let take = shots.min(containing.len());
        let picks = index::sample(&mut rng, containing.len(), take);
        let mut ids = Vec::with_capacity(take);
        for p in picks.iter() {
            let sample = &train[containing[p]];
            ids.push(sample.id.clone());
            support.push(sample.clone());
        }
        selections.push(ClassShots { class, sample_ids: ids });
    }
    Ok(Episode {
        shots,
        support,
        selections,
        eval_set: eval_set.to_vec(),
        seed,
    })
}

/// Which classes an evaluation (or label remapping) considers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Base and novel classes together.
    Generalized,
    /// Only novel classes; base pixels count as background.
    NovelOnly,
}

/// Remaps a label grid for `mode`. Generalized mode is the identity; novel-only
/// mode sends base-class pixels to background and keeps novel and ignore
/// pixels.
pub fn remap_label_grid(labels: &Array2<u8>, fold: &FoldSpec, mode: EvalMode, ignore: u8) -> Array2<u8> {
    match mode {
        EvalMode::Generalized => labels.clone(),
        EvalMode::NovelOnly => labels.mapv(|v| if v == ignore || fold.is_novel(v as usize) { v } else { 0 }),
    }
}

pub fn remap_labels(sample: &SegmentationSample, fold: &FoldSpec, mode: EvalMode, ignore: u8) -> SegmentationSample {
    SegmentationSample {
        id: sample.id.clone(),
        image: sample.image.clone(),
        labels: remap_label_grid(&sample.labels, fold, mode, ignore),
    }
}

/// Train split, validation split and their dataset constants.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub spec: DatasetSpec,
    pub train: Vec<SegmentationSample>,
    pub val: Vec<SegmentationSample>,
}
