//! Paired-PNG dataset directories.
//!
//! ```text
//! root/manifest.json
//! root/images/<id>.png   RGB, 8 bits per channel
//! root/labels/<id>.png   single channel, class index per pixel
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, DatasetSpec, FoldScheme, SegmentationSample};
use crate::error::{ingestion, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub num_classes: usize,
    pub ignore_value: u8,
    pub num_folds: usize,
    #[serde(default = "default_scheme")]
    pub fold_scheme: FoldScheme,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

fn default_scheme() -> FoldScheme {
    FoldScheme::Contiguous
}

/// Reads a paired-PNG dataset. Samples of each split are returned sorted by id.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetBundle> {
    let root = root.as_ref();
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| ingestion(&manifest_path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ingestion(&manifest_path, format!("invalid manifest: {e}")))?;
    let spec = DatasetSpec::new(
        manifest.name.clone(),
        manifest.num_classes,
        manifest.ignore_value,
        manifest.num_folds,
        manifest.fold_scheme,
    )
    .map_err(|e| ingestion(&manifest_path, e.to_string()))?;

    let load_split = |ids: &[String]| -> Result<Vec<SegmentationSample>> {
        let mut out = ids
            .iter()
            .map(|id| load_sample(root, id, &spec))
            .collect::<Result<Vec<_>>>()?;
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    };
    let train = load_split(&manifest.train)?;
    let val = load_split(&manifest.val)?;
    Ok(DatasetBundle { spec, train, val })
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join("labels").join(format!("{id}.png"))
}

fn load_sample(root: &Path, id: &str, spec: &DatasetSpec) -> Result<SegmentationSample> {
    let ipath = image_path(root, id);
    let rgb = image::open(&ipath)
        .map_err(|e| ingestion(&ipath, e.to_string()))?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            img[[ch, y as usize, x as usize]] = f32::from(px[ch]) / 255.0;
        }
    }

    let lpath = label_path(root, id);
    let decoded = image::open(&lpath).map_err(|e| ingestion(&lpath, e.to_string()))?;
    let gray = match decoded {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(ingestion(
                &lpath,
                format!("label map must be 8-bit single channel, got {:?}", other.color()),
            ))
        }
    };
    if (gray.width() as usize, gray.height() as usize) != (w, h) {
        return Err(ingestion(
            &lpath,
            format!("label map is {}x{} but image is {w}x{h}", gray.width(), gray.height()),
        ));
    }
    let mut labels = Array2::<u8>::zeros((h, w));
    for (x, y, px) in gray.enumerate_pixels() {
        let v = px[0];
        if v != spec.ignore_value && v as usize > spec.num_classes {
            return Err(ingestion(
                &lpath,
                format!("label value {v} at ({x}, {y}) outside 0..={}", spec.num_classes),
            ));
        }
        labels[[y as usize, x as usize]] = v;
    }
    SegmentationSample::new(id, img, labels).map_err(|e| ingestion(&lpath, e.to_string()))
}

/// Writes a dataset in the paired-PNG layout. Image values are quantized to
/// 8 bits.
pub fn write_dataset(root: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("labels"))?;
    for s in bundle.train.iter().chain(&bundle.val) {
        let (_, h, w) = s.image.dim();
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| (s.image[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        let ipath = image_path(root, &s.id);
        rgb.save(&ipath).map_err(|e| ingestion(&ipath, e.to_string()))?;
        let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([s.labels[[y as usize, x as usize]]])
        });
        let lpath = label_path(root, &s.id);
        gray.save(&lpath).map_err(|e| ingestion(&lpath, e.to_string()))?;
    }
    let manifest = Manifest {
        name: bundle.spec.name.clone(),
        num_classes: bundle.spec.num_classes,
        ignore_value: bundle.spec.ignore_value,
        num_folds: bundle.spec.num_folds,
        fold_scheme: bundle.spec.fold_scheme,
        train: bundle.train.iter().map(|s| s.id.clone()).collect(),
        val: bundle.val.iter().map(|s| s.id.clone()).collect(),
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
