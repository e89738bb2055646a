//! Desk-scale synthetic segmentation data: colored geometric shapes on a
//! noisy background.
//!
//! Every object class has its own (shape, hue) signature. Neighbouring hues
//! overlap a little, so color alone is not quite enough and a network has to
//! pick up the outline as well.

use ndarray::{Array2, Array3};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetBundle, DatasetSpec, FoldScheme, SegmentationSample, IGNORE_LABEL};
use crate::error::{domain, Result};
use crate::seed;

const MAX_ATTEMPTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
    Bar,
    Hourglass,
}

impl ShapeKind {
    const ALL: [ShapeKind; 8] = [
        ShapeKind::Disc,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Bar,
        ShapeKind::Hourglass,
    ];

    pub fn for_class(class: usize) -> Self {
        Self::ALL[(class - 1) % Self::ALL.len()]
    }

    /// Membership test in coordinates normalized by the shape radius.
    fn contains(self, u: f32, v: f32) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Disc => r2 <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Triangle => (-0.85..=0.85).contains(&v) && u.abs() <= (v + 0.85) * 0.6,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Ring => (0.3..=1.0).contains(&r2),
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 0.4,
            ShapeKind::Hourglass => v.abs() <= 0.9 && u.abs() <= v.abs() + 0.1,
        }
    }
}

/// Generator knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub num_folds: usize,
    /// Fraction of images held out for validation.
    pub val_fraction: f64,
    /// Half-width of the per-instance hue jitter, in units of the hue spacing
    /// between consecutive classes.
    pub hue_jitter: f32,
    pub max_shapes: usize,
}

impl SyntheticParams {
    pub fn new(num_classes: usize, images: usize, size: (usize, usize), seed: u64) -> Self {
        Self {
            num_classes,
            images,
            height: size.0,
            width: size.1,
            seed,
            num_folds: 4,
            val_fraction: 0.2,
            hue_jitter: 0.6,
            max_shapes: 4,
        }
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        DatasetSpec::new(
            format!("synthetic-{}", self.num_classes),
            self.num_classes,
            IGNORE_LABEL,
            self.num_folds,
            FoldScheme::Contiguous,
        )
    }
}

/// Generates `(train, val, spec)` with `images` samples in total.
pub fn generate_synthetic_dataset(
    num_classes: usize,
    images: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<DatasetBundle> {
    SyntheticParams::new(num_classes, images, size, seed).generate()
}

impl SyntheticParams {
    pub fn generate(&self) -> Result<DatasetBundle> {
        if self.num_classes < 2 * self.num_folds {
            return Err(domain(format!(
                "need at least {} classes for {} folds with two novel classes each",
                2 * self.num_folds,
                self.num_folds
            )));
        }
        if self.height < 32 || self.width < 32 {
            return Err(domain("synthetic images must be at least 32x32"));
        }
        if self.images < 2 {
            return Err(domain("need at least two images (train and validation)"));
        }
        let spec = self.dataset_spec()?;
        let min_presence = self.images.div_ceil(2 * self.num_classes);
        for attempt in 0..MAX_ATTEMPTS {
            let stream_seed = seed::derive_seed(self.seed, &format!("synthetic-attempt-{attempt}"));
            let samples = self.generate_once(stream_seed)?;
            let mut presence = vec![0usize; self.num_classes + 1];
            for s in &samples {
                for c in s.present_classes(IGNORE_LABEL) {
                    presence[c] += 1;
                }
            }
            if presence[1..].iter().all(|&n| n >= min_presence) {
                let n_val = ((self.images as f64 * self.val_fraction).round() as usize).clamp(1, self.images - 1);
                let mut train = samples;
                let val = train.split_off(self.images - n_val);
                return Ok(DatasetBundle { spec, train, val });
            }
        }
        Err(domain(format!(
            "could not reach {min_presence} images per class after {MAX_ATTEMPTS} attempts"
        )))
    }

    fn generate_once(&self, stream_seed: u64) -> Result<Vec<SegmentationSample>> {
        let mut rng = seed::rng(stream_seed, "synthetic");
        (0..self.images)
            .map(|i| {
                let id = format!("syn{:03}_{:05}", self.seed % 1000, i);
                self.render(&mut rng, id)
            })
            .collect()
    }

    fn render(&self, rng: &mut ChaCha8Rng, id: String) -> Result<SegmentationSample> {
        let (h, w) = (self.height, self.width);
        let mut image = Array3::<f32>::zeros((3, h, w));
        let mut labels = Array2::<u8>::zeros((h, w));

        let bg = hsv_to_rgb(
            rng.random::<f32>(),
            rng.random_range(0.0..0.25),
            rng.random_range(0.15..0.45),
        );
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    image[[ch, y, x]] = bg[ch] + rng.random_range(-0.06..0.06);
                }
            }
        }

        let count = rng.random_range(1..=self.max_shapes.min(self.num_classes));
        let classes = index::sample(rng, self.num_classes, count);
        let min_dim = h.min(w) as f32;
        let mut placed: Vec<(f32, f32, f32)> = Vec::new();
        for class in classes.iter().map(|c| c + 1) {
            let radius = rng.random_range(min_dim / 10.0..min_dim / 5.0);
            let mut spot = None;
            for _ in 0..100 {
                let cy = rng.random_range(radius + 1.0..h as f32 - radius - 2.0);
                let cx = rng.random_range(radius + 1.0..w as f32 - radius - 2.0);
                let clear = placed
                    .iter()
                    .all(|&(py, px, pr)| ((py - cy).powi(2) + (px - cx).powi(2)).sqrt() >= pr + radius + 3.0);
                if clear {
                    spot = Some((cy, cx));
                    break;
                }
            }
            let Some((cy, cx)) = spot else {
                if placed.is_empty() {
                    return Err(domain(format!("cannot place a shape in a {h}x{w} image")));
                }
                continue;
            };
            placed.push((cy, cx, radius));
            self.draw(rng, &mut image, &mut labels, class, (cy, cx), radius);
        }

        image.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        SegmentationSample::new(id, image, labels)
    }

    fn draw(
        &self,
        rng: &mut ChaCha8Rng,
        image: &mut Array3<f32>,
        labels: &mut Array2<u8>,
        class: usize,
        (cy, cx): (f32, f32),
        radius: f32,
    ) {
        let (h, w) = labels.dim();
        let kind = ShapeKind::for_class(class);
        let spacing = 1.0 / self.num_classes as f32;
        let hue = (class - 1) as f32 * spacing + rng.random_range(-self.hue_jitter..=self.hue_jitter) * spacing;
        let color = hsv_to_rgb(
            hue.rem_euclid(1.0),
            rng.random_range(0.55..1.0),
            rng.random_range(0.6..1.0),
        );
        let inside = |y: isize, x: isize| -> bool {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                return false;
            }
            let u = (x as f32 + 0.5 - cx) / radius;
            let v = (y as f32 + 0.5 - cy) / radius;
            kind.contains(u, v)
        };
        let y0 = (cy - radius - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + radius + 2.0).ceil() as usize).min(h);
        let x0 = (cx - radius - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + radius + 2.0).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let (yi, xi) = (y as isize, x as isize);
                if !inside(yi, xi) {
                    continue;
                }
                for ch in 0..3 {
                    image[[ch, y, x]] = color[ch] + rng.random_range(-0.06..0.06);
                }
                let boundary = !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1));
                labels[[y, x]] = if boundary { IGNORE_LABEL } else { class as u8 };
            }
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
