use std::collections::BTreeSet;

use gfss::data::*;
use gfss::loss::{build_triplet_set, LabelBatch};
use proptest::prelude::*;

#[test]
fn pascal_and_coco_closed_forms() {
    for i in 0..4 {
        let want: Vec<usize> = (1..=5).map(|j| 5 * i + j).collect();
        assert_eq!(pascal_fold_classes(i).unwrap(), want);
        let want: Vec<usize> = (1..=20).map(|j| 4 * j - 3 + i).collect();
        assert_eq!(coco_fold_classes(i).unwrap(), want);
    }
    assert!(pascal_fold_classes(4).is_err());
    assert!(coco_fold_classes(4).is_err());
}

#[test]
fn folds_partition_the_classes() {
    for spec in [DatasetSpec::pascal_voc(), DatasetSpec::coco()] {
        let mut seen = BTreeSet::new();
        for i in 0..spec.num_folds {
            let f = make_fold(&spec, i, 0).unwrap();
            let base: BTreeSet<_> = f.base_classes.iter().copied().collect();
            let novel: BTreeSet<_> = f.novel_classes.iter().copied().collect();
            assert!(base.is_disjoint(&novel));
            assert_eq!(base.union(&novel).count(), spec.num_classes + 1);
            assert!(base.contains(&0) && !novel.contains(&0));
            seen.extend(novel);
        }
        // every object class is novel in exactly one fold
        assert_eq!(seen.len(), spec.num_classes);
    }
}

#[test]
fn ratio_shift_limits() {
    let ds = generate_synthetic_dataset(8, 16, (32, 32), 0).unwrap();
    // two novel classes per fold allow a shift of one either way
    assert_eq!(make_fold(&ds.spec, 1, 1).unwrap().novel_classes.len(), 3);
    assert_eq!(make_fold(&ds.spec, 1, -1).unwrap().novel_classes.len(), 1);
    assert!(make_fold(&ds.spec, 1, -2).is_err());
    assert!(make_fold(&ds.spec, 1, 2).is_err());
}

proptest! {
    #[test]
    fn ratio_shift_keeps_partition(fold in 0usize..4, shift in -4i32..=4) {
        let spec = DatasetSpec::pascal_voc();
        let f = make_fold(&spec, fold, shift).unwrap();
        prop_assert_eq!(f.novel_classes.len() as i32, 5 + shift);
        let mut all = f.base_classes.clone();
        all.extend(&f.novel_classes);
        all.sort_unstable();
        prop_assert_eq!(all, (0..=20).collect::<Vec<_>>());
        prop_assert!(!f.novel_classes.contains(&0));
    }

    #[test]
    fn episode_selects_min_k_available(shots in 1usize..6, seed in 0u64..50) {
        let ds = generate_synthetic_dataset(8, 24, (32, 32), 3).unwrap();
        let fold = make_fold(&ds.spec, 0, 0).unwrap();
        let ep = sample_episode(&ds.train, &ds.val, &fold, IGNORE_LABEL, shots, seed).unwrap();
        prop_assert_eq!(ep.selections.len(), fold.all_classes().len());
        for sel in &ep.selections {
            let available = ds.train.iter().filter(|s| s.contains_class(sel.class, IGNORE_LABEL)).count();
            prop_assert_eq!(sel.sample_ids.len(), shots.min(available));
            let unique: BTreeSet<_> = sel.sample_ids.iter().collect();
            prop_assert_eq!(unique.len(), sel.sample_ids.len());
            for id in &sel.sample_ids {
                let s = ds.train.iter().find(|s| &s.id == id).unwrap();
                prop_assert!(s.contains_class(sel.class, IGNORE_LABEL));
            }
        }
        let again = sample_episode(&ds.train, &ds.val, &fold, IGNORE_LABEL, shots, seed).unwrap();
        prop_assert_eq!(again.selections, ep.selections);
    }

    #[test]
    fn triplet_sampler_respects_labels(
        labels in prop::collection::vec(prop_oneof![0u32..4, Just(255u32)], 2 * 6 * 6),
        seed in any::<u64>(),
        tau in 1usize..60,
    ) {
        let lb = LabelBatch::new(labels.clone(), 2, 6, 6, 255).unwrap();
        let set = build_triplet_set(&lb, &[0, 1, 2, 3], tau, seed);
        for ct in &set.classes {
            let pos = labels.iter().filter(|&&v| v == ct.class).count();
            let neg = labels.iter().filter(|&&v| v != ct.class && v != 255).count();
            prop_assert_eq!(ct.triplets.len(), tau.min(pos / 2).min(neg));
            let anchors: BTreeSet<_> = ct.triplets.iter().map(|t| t.anchor).collect();
            let positives: BTreeSet<_> = ct.triplets.iter().map(|t| t.positive).collect();
            prop_assert!(anchors.is_disjoint(&positives));
            prop_assert_eq!(anchors.len(), ct.triplets.len());
            for t in &ct.triplets {
                prop_assert_eq!(labels[t.anchor], ct.class);
                prop_assert_eq!(labels[t.positive], ct.class);
                prop_assert!(labels[t.negative] != ct.class && labels[t.negative] != 255);
            }
        }
        prop_assert_eq!(build_triplet_set(&lb, &[0, 1, 2, 3], tau, seed), set);
    }
}

#[test]
fn synthetic_dataset_is_deterministic_and_round_trips() {
    let a = generate_synthetic_dataset(8, 12, (32, 32), 5).unwrap();
    let b = generate_synthetic_dataset(8, 12, (32, 32), 5).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &a).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.spec, a.spec);
    assert_eq!(back.train.len(), a.train.len());
    for (x, y) in back.train.iter().zip(&a.train) {
        assert_eq!(x.labels, y.labels);
        // images are stored as 8-bit PNG
        let err = x
            .image
            .iter()
            .zip(&y.image)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6, "{err}");
    }
}
