//! `export-masks`: predicted label maps as palette PNGs.
//!
//! Palette index equals the class index. Classes use the usual VOC
//! bit-interleaved colormap and index 255 (ignore) is white.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use gfss::data::{DatasetBundle, SegmentationSample};
use gfss::eval::predict;
use gfss::model::load_checkpoint;
use ndarray::Array2;

use crate::CliError;

/// 256-entry RGB palette.
pub fn palette() -> Vec<u8> {
    let mut p = Vec::with_capacity(256 * 3);
    for i in 0..256usize {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        if i == 255 {
            (r, g, b) = (255, 255, 255);
        }
        p.extend_from_slice(&[r, g, b]);
    }
    p
}

/// Writes `mask` as an 8-bit indexed PNG.
pub fn write_mask(path: impl AsRef<Path>, mask: &Array2<u8>) -> anyhow::Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.dim();
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette());
    enc.set_compression(png::Compression::Default);
    let mut writer = enc.write_header()?;
    let data: Vec<u8> = mask.iter().copied().collect();
    writer.write_image_data(&data)?;
    writer.finish()?;
    Ok(())
}

/// Reads the palette indices of an indexed PNG.
pub fn read_mask(path: impl AsRef<Path>) -> anyhow::Result<Array2<u8>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    anyhow::ensure!(
        info.color_type == png::ColorType::Indexed && info.bit_depth == png::BitDepth::Eight,
        "{} is not an 8-bit indexed PNG",
        path.display()
    );
    buf.truncate(info.buffer_size());
    Ok(Array2::from_shape_vec(
        (info.height as usize, info.width as usize),
        buf,
    )?)
}

/// Loads samples from a dataset directory or from the dataset of an
/// experiment config (`*.toml`).
pub fn load_samples(source: &Path) -> Result<DatasetBundle, CliError> {
    if source.extension().is_some_and(|e| e == "toml") {
        let cfg = crate::ExperimentConfig::load(source)?;
        Ok(cfg.dataset.load()?)
    } else {
        Ok(gfss::data::load_dataset(source)?)
    }
}

/// Predicts every sample with the checkpoint at `ckpt` and writes
/// `<id>.png` into `out`. Pixels whose ground truth is `ignore` are
/// exported as 255.
pub fn export_masks(
    ckpt: &Path,
    samples: &[SegmentationSample],
    ignore: u8,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let checkpoint = load_checkpoint(ckpt, None)?;
    let classes = checkpoint
        .output_classes
        .clone()
        .unwrap_or_else(|| (0..checkpoint.network.num_outputs()).collect());
    if classes.len() != checkpoint.network.num_outputs() || classes.iter().any(|&c| c >= usize::from(u8::MAX)) {
        return Err(CliError::Config(format!(
            "{} has an invalid class list",
            ckpt.display()
        )));
    }
    std::fs::create_dir_all(out)?;
    let preds = predict(&checkpoint.network, samples, &classes, 8)?;
    let mut written = Vec::with_capacity(samples.len());
    for (mut pred, sample) in preds.into_iter().zip(samples) {
        pred.zip_mut_with(&sample.labels, |p, &g| {
            if g == ignore {
                *p = 255;
            }
        });
        let path = out.join(format!("{}.png", sample.id));
        write_mask(&path, &pred)?;
        written.push(path);
    }
    Ok(written)
}
