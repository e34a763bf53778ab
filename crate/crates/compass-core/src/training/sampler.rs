//! Training-data loading and multi-scale pyramid sampling.

use std::path::Path;

use ndarray::{s, Array3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::image_io;
use crate::tensor::resample;

/// File extensions accepted as training images.
const EXTENSIONS: [&str; 5] = ["png", "ppm", "pgm", "pbm", "pnm"];

/// Load every supported image in `dir`, sorted by file name so the dataset
/// order is stable across platforms. Returns `(file_name, image)` pairs.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Array3<f64>)>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!(
            "no images with extensions {EXTENSIONS:?} in {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, image_io::load_image(&p)?))
        })
        .collect()
}

/// Sample a `levels + 1` layer pyramid from `image`.
///
/// A random `crop_size`-square crop (clamped to the image) becomes the top
/// layer. Walking down, each layer's dimensions divide the previous ones by
/// an independent factor drawn uniformly from `[scale_min, scale_max)`, so
/// adjacent layers are related by arbitrary non-integer scales; when the two
/// bounds coincide the factor is fixed at that value. Every layer below the
/// top is resampled from the crop itself and clamped to `[0, 1]`.
///
/// Random draws happen in a fixed order — crop row, crop column, then one
/// factor per boundary from the top down — so samples are reproducible from
/// the RNG state alone.
pub fn sample_pyramid(
    image: &Array3<f64>,
    levels: usize,
    crop_size: usize,
    scale_min: f64,
    scale_max: f64,
    rng: &mut ChaCha20Rng,
) -> Vec<Array3<f64>> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let ch = crop_size.min(h);
    let cw = crop_size.min(w);
    let r0 = rng.gen_range(0..=h - ch);
    let c0 = rng.gen_range(0..=w - cw);
    let crop = image.slice(s![r0..r0 + ch, c0..c0 + cw, ..]).to_owned();

    let mut dims = vec![(0usize, 0usize); levels + 1];
    dims[levels] = (ch, cw);
    for k in (1..=levels).rev() {
        let f = if scale_max > scale_min {
            rng.gen_range(scale_min..scale_max)
        } else {
            scale_min
        };
        let (hk, wk) = dims[k];
        dims[k - 1] = (
            ((hk as f64 / f).round() as usize).max(1),
            ((wk as f64 / f).round() as usize).max(1),
        );
    }

    dims.iter()
        .enumerate()
        .map(|(k, &(lh, lw))| {
            if k == levels {
                crop.clone()
            } else {
                resample::resize(crop.view(), lh, lw).mapv(|v| v.clamp(0.0, 1.0))
            }
        })
        .collect()
}
