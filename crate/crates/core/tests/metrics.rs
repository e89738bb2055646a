use std::collections::BTreeSet;

use gfss::data::{EvalMode, FoldSpec};
use gfss::eval::*;
use ndarray::Array2;
use proptest::prelude::*;

const IGNORE: u8 = 255;

fn fold() -> FoldSpec {
    FoldSpec {
        fold_index: 0,
        base_classes: vec![0, 3, 4],
        novel_classes: vec![1, 2],
        ratio_shift: 0,
    }
}

/// IoU from explicit pixel sets.
fn set_iou(preds: &[Array2<u8>], gts: &[Array2<u8>], class: u8) -> Option<f64> {
    let mut p = BTreeSet::new();
    let mut g = BTreeSet::new();
    for (i, (pr, gt)) in preds.iter().zip(gts).enumerate() {
        for (j, (&a, &b)) in pr.iter().zip(gt).enumerate() {
            if b == IGNORE {
                continue;
            }
            if a == class {
                p.insert((i, j));
            }
            if b == class {
                g.insert((i, j));
            }
        }
    }
    let union = p.union(&g).count();
    (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64)
}

/// Ground truth with ignore pixels.
fn grid(size: usize, classes: u8) -> impl Strategy<Value = Array2<u8>> {
    prop::collection::vec(prop_oneof![8 => 0..classes, 1 => Just(IGNORE)], size * size)
        .prop_map(move |v| Array2::from_shape_vec((size, size), v).unwrap())
}

fn pred(size: usize, classes: u8) -> impl Strategy<Value = Array2<u8>> {
    prop::collection::vec(0..classes, size * size).prop_map(move |v| Array2::from_shape_vec((size, size), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn accumulator_matches_pixel_sets(pairs in prop::collection::vec((pred(8, 4), grid(8, 4)), 1..4)) {
        let (preds, gts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let mut acc = ConfusionAccumulator::new(5);
        for (p, g) in preds.iter().zip(&gts) {
            acc.accumulate(p, g, IGNORE).unwrap();
        }
        for c in 0..5u8 {
            prop_assert_eq!(acc.iou(c as usize), set_iou(&preds, &gts, c));
        }
        if let Ok(r) = finalize(&acc, &fold(), EvalMode::Generalized, 1) {
            let defined: Vec<f64> = [0u8, 1, 2, 3, 4].iter().filter_map(|&c| set_iou(&preds, &gts, c)).collect();
            let mean = defined.iter().sum::<f64>() / defined.len() as f64;
            prop_assert!((r.total_miou - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulation_is_additive_and_order_free(pairs in prop::collection::vec((pred(6, 5), grid(6, 5)), 2..5)) {
        let mut whole = ConfusionAccumulator::new(5);
        for (p, g) in &pairs {
            whole.accumulate(p, g, IGNORE).unwrap();
        }
        let mut rev = ConfusionAccumulator::new(5);
        for (p, g) in pairs.iter().rev() {
            rev.accumulate(p, g, IGNORE).unwrap();
        }
        prop_assert_eq!(&whole, &rev);
        let mid = pairs.len() / 2;
        let mut a = ConfusionAccumulator::new(5);
        let mut b = ConfusionAccumulator::new(5);
        for (p, g) in &pairs[..mid] {
            a.accumulate(p, g, IGNORE).unwrap();
        }
        for (p, g) in &pairs[mid..] {
            b.accumulate(p, g, IGNORE).unwrap();
        }
        a.merge(&b).unwrap();
        prop_assert_eq!(a, whole);
    }

    #[test]
    fn ious_lie_in_unit_interval(p in pred(6, 5), g in grid(6, 5)) {
        let mut acc = ConfusionAccumulator::new(5);
        acc.accumulate(&p, &g, IGNORE).unwrap();
        for c in 0..5 {
            if let Some(v) = acc.iou(c) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}

#[test]
fn cross_fold_and_saturation() {
    let mut acc = ConfusionAccumulator::new(5);
    let g = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 5) as u8);
    acc.accumulate(&g, &g, IGNORE).unwrap();
    let r = finalize(&acc, &fold(), EvalMode::Generalized, 5).unwrap();
    let s = cross_fold_average(&[r.clone(), r.clone()]).unwrap();
    assert_eq!(s.total_miou, 1.0);
    let t = saturation_summary(&[(1, r.clone()), (5, r)].into_iter().collect());
    assert_eq!(t.rows[1].delta_total, Some(0.0));
}
