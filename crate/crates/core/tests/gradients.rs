use candle_core::{DType, Device, Tensor, Var};
use gfss::loss::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;

fn value(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Compares the autograd gradient of `f` at `x` with central differences.
fn check(x: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_vec(x.to_vec(), shape, &Device::Cpu).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let g: Vec<f64> = match grads.get(&var) {
        Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
        None => vec![0.0; x.len()],
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        hi[i] += EPS;
        lo[i] -= EPS;
        let at = |v: Vec<f64>| value(&f(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()));
        let fd = (at(hi) - at(lo)) / (2.0 * EPS);
        let rel = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1e-6);
        worst = worst.max(if (g[i] - fd).abs() < 1e-8 { 0.0 } else { rel });
    }
    worst
}

/// Random features whose every triplet sits at least 0.05 from the hinge kink.
fn features_away_from_kink(rng: &mut ChaCha8Rng, rows: usize, dim: usize, set: &TripletSet, margin: f64) -> Vec<f64> {
    loop {
        let f: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let row = |i: usize| &f[i * dim..(i + 1) * dim];
        let ok = set.iter().all(|t| {
            let ap = triplet_distance(row(t.anchor), row(t.positive)).unwrap();
            let an = triplet_distance(row(t.anchor), row(t.negative)).unwrap();
            (ap - an + margin).abs() >= 0.05 && ap > 0.05 && an > 0.05
        });
        if ok {
            return f;
        }
    }
}

fn random_set(rng: &mut ChaCha8Rng, rows: usize, count: usize) -> TripletSet {
    let triplets = (0..count)
        .map(|_| {
            let a = rng.random_range(0..rows);
            let p = (a + rng.random_range(1..rows)) % rows;
            let n = (a + rng.random_range(1..rows)) % rows;
            Triplet {
                anchor: a,
                positive: p,
                negative: n,
            }
        })
        .collect();
    TripletSet {
        tau: 50,
        classes: vec![ClassTriplets { class: 0, triplets }],
    }
}

#[test]
fn triplet_term_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let set = random_set(&mut rng, 8, 6);
        let x = features_away_from_kink(&mut rng, 8, 3, &set, 1.0);
        let err = check(&x, &[8, 3], |t| triplet_term(t, &set, 1.0).unwrap());
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn cosine_term_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let set = random_set(&mut rng, 8, 6);
        let x: Vec<f64> = loop {
            let f: Vec<f64> = (0..24).map(|_| rng.random_range(-1.5..1.5)).collect();
            let row = |i: usize| &f[i * 3..(i + 1) * 3];
            let cos = |a: &[f64], b: &[f64]| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                dot / (triplet_distance(a, &[0.0; 3]).unwrap() * triplet_distance(b, &[0.0; 3]).unwrap())
            };
            if set.iter().all(|t| cos(row(t.anchor), row(t.negative)).abs() > 0.05) {
                break f;
            }
        };
        let err = check(&x, &[8, 3], |t| cosine_term(t, &set).unwrap());
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn composite_stage_losses_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (b, c, h, w) = (2, 3, 2, 2);
    let labels = LabelBatch::new((0..8).map(|i| if i == 5 { 255 } else { i % 3 }).collect(), b, h, w, 255).unwrap();
    let weights = LossWeights::default();
    let set = random_set(&mut rng, 8, 5);
    let n_logits = b * c * h * w;
    for _ in 0..5 {
        let logits: Vec<f64> = (0..n_logits).map(|_| rng.random_range(-2.0..2.0)).collect();
        let aux: Vec<f64> = (0..n_logits).map(|_| rng.random_range(-2.0..2.0)).collect();
        let feats = features_away_from_kink(&mut rng, 8, 3, &set, 1.0);
        let mut x = logits;
        x.extend(aux);
        x.extend(feats);
        let total = x.len();
        for stage in [Stage::Base, Stage::FineTune] {
            let err = check(&x, &[total], |t| {
                let lg = t.narrow(0, 0, n_logits).unwrap().reshape((b, c, h, w)).unwrap();
                let ax = t.narrow(0, n_logits, n_logits).unwrap().reshape((b, c, h, w)).unwrap();
                let f = t.narrow(0, 2 * n_logits, 24).unwrap().reshape((8, 3)).unwrap();
                let main = masked_cross_entropy(&lg, &labels).unwrap();
                let trip = triplet_term(&f, &set, weights.margin).unwrap();
                match stage {
                    Stage::Base => {
                        let aux = masked_cross_entropy(&ax, &labels).unwrap();
                        stage_loss_with_triplet(&main, Some(&aux), &trip, &weights, stage).unwrap()
                    }
                    Stage::FineTune => stage_loss_with_triplet(&main, None, &trip, &weights, stage).unwrap(),
                }
            });
            assert!(err < 1e-4, "{stage:?}: relative error {err}");
        }
    }
}
