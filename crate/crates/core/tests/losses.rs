use candle_core::{DType, Device, Tensor, Var};
use gfss::loss::*;
use proptest::prelude::*;

fn ce_oracle(logits: &[f64], labels: &[u32], b: usize, c: usize, hw: usize, ignore: u32) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for bi in 0..b {
        for p in 0..hw {
            let y = labels[bi * hw + p];
            if y == ignore {
                continue;
            }
            let at = |k: usize| logits[(bi * c + k) * hw + p];
            let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|k| (at(k) - m).exp()).sum::<f64>().ln();
            sum += lse - at(y as usize);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

fn value(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

prop_compose! {
    fn ce_case()(b in 1usize..3, c in 2usize..5, h in 1usize..4, w in 1usize..4)
        (logits in prop::collection::vec(-8.0f64..8.0, b * c * h * w),
         labels in prop::collection::vec(0u32..(c as u32 + 1), b * h * w),
         b in Just(b), c in Just(c), h in Just(h), w in Just(w))
        -> (Vec<f64>, Vec<u32>, usize, usize, usize, usize) {
        // label value `c` plays the ignore role
        (logits, labels, b, c, h, w)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cross_entropy_matches_oracle((logits, labels, b, c, h, w) in ce_case()) {
        let ignore = c as u32;
        let t = Tensor::from_vec(logits.clone(), (b, c, h, w), &Device::Cpu).unwrap();
        let lb = LabelBatch::new(labels.clone(), b, h, w, ignore).unwrap();
        let got = value(&masked_cross_entropy(&t, &lb).unwrap());
        let want = ce_oracle(&logits, &labels, b, c, h * w, ignore);
        prop_assert!(close(got, want, 1e-9), "{got} vs {want}");
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn triplet_term_is_mean_of_scalar_losses(
        feats in prop::collection::vec(-2.0f64..2.0, 12 * 3),
        idx in prop::collection::vec((0usize..12, 0usize..12, 0usize..12), 1..8),
        margin in 0.1f64..2.0,
    ) {
        let f = Tensor::from_vec(feats.clone(), (12, 3), &Device::Cpu).unwrap();
        let set = TripletSet {
            tau: 50,
            classes: vec![ClassTriplets {
                class: 0,
                triplets: idx.iter().map(|&(anchor, positive, negative)| Triplet { anchor, positive, negative }).collect(),
            }],
        };
        let row = |i: usize| &feats[i * 3..i * 3 + 3];
        let want = idx
            .iter()
            .map(|&(a, p, n)| triplet_loss(row(a), row(p), row(n), margin).unwrap())
            .sum::<f64>()
            / idx.len() as f64;
        let got = value(&triplet_term(&f, &set, margin).unwrap());
        prop_assert!(close(got, want, 1e-9), "{got} vs {want}");
    }

    #[test]
    fn triplet_loss_properties(
        a in prop::collection::vec(-3.0f64..3.0, 4),
        p in prop::collection::vec(-3.0f64..3.0, 4),
        n in prop::collection::vec(-3.0f64..3.0, 4),
        margin in 0.0f64..2.0,
    ) {
        let l = triplet_loss(&a, &p, &n, margin).unwrap();
        prop_assert!(l >= 0.0);
        // anchor equals positive and the negative is farther than the margin
        let far: Vec<f64> = a.iter().map(|x| x + margin + 1.0).collect();
        prop_assert_eq!(triplet_loss(&a, &a, &far, margin).unwrap(), 0.0);
        // symmetric in the roles of the distances
        prop_assert!((triplet_distance(&a, &p).unwrap() - triplet_distance(&p, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn stage_compositions(main in 0.0f64..5.0, aux in 0.0f64..5.0, trip in 0.0f64..5.0) {
        let w = LossWeights::default();
        let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let e1 = value(&stage1_loss(&s(main), &s(aux), &w).unwrap());
        prop_assert!(close(e1, main + 0.4 * aux, 1e-12));
        prop_assert_eq!(value(&stage2_loss(&s(main))), main);
        let e4 = value(&stage_loss_with_triplet(&s(main), Some(&s(aux)), &s(trip), &w, Stage::Base).unwrap());
        prop_assert!(close(e4, main + 0.4 * aux + 0.5 * trip, 1e-12));
        let e5 = value(&stage_loss_with_triplet(&s(main), None, &s(trip), &w, Stage::FineTune).unwrap());
        prop_assert!(close(e5, main + trip, 1e-12));
        prop_assert!(stage_loss_with_triplet(&s(main), Some(&s(aux)), &s(trip), &w, Stage::FineTune).is_err());
    }

    #[test]
    fn cosine_term_is_bounded(
        feats in prop::collection::vec(-2.0f64..2.0, 10 * 4),
        idx in prop::collection::vec((0usize..10, 0usize..10, 0usize..10), 1..6),
    ) {
        let f = Tensor::from_vec(feats, (10, 4), &Device::Cpu).unwrap();
        let set = TripletSet {
            tau: 50,
            classes: vec![ClassTriplets {
                class: 0,
                triplets: idx.iter().map(|&(anchor, positive, negative)| Triplet { anchor, positive, negative }).collect(),
            }],
        };
        let v = value(&cosine_term(&f, &set).unwrap());
        prop_assert!((-1e-9..=3.0 + 1e-9).contains(&v), "{v}");
    }
}

#[test]
fn ignore_pixels_get_no_gradient() {
    let logits = Var::from_vec(
        (0..8).map(|i| i as f64 * 0.3).collect::<Vec<_>>(),
        (1, 2, 2, 2),
        &Device::Cpu,
    )
    .unwrap();
    let labels = LabelBatch::new(vec![0, 255, 1, 255], 1, 2, 2, 255).unwrap();
    let loss = masked_cross_entropy(logits.as_tensor(), &labels).unwrap();
    let g: Vec<f64> = loss
        .backward()
        .unwrap()
        .get(&logits)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    // channel-major layout: pixels 1 and 3 are ignored in both channels
    for k in [1, 3, 5, 7] {
        assert_eq!(g[k], 0.0);
    }
    assert!(g[0] != 0.0 && g[2] != 0.0);
}

#[test]
fn all_ignore_batch_is_zero() {
    let logits = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
    let labels = LabelBatch::new(vec![9; 4], 1, 2, 2, 9).unwrap();
    assert_eq!(value(&masked_cross_entropy(&logits, &labels).unwrap()), 0.0);
}

#[test]
fn label_out_of_range_is_rejected() {
    let logits = Tensor::zeros((1, 2, 1, 1), DType::F64, &Device::Cpu).unwrap();
    let labels = LabelBatch::new(vec![5], 1, 1, 1, 255).unwrap();
    assert!(masked_cross_entropy(&logits, &labels).is_err());
}
