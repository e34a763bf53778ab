//! Rate–distortion measurement over images and model sweeps, and CSV output.

use std::path::Path;

use ndarray::Array3;

use crate::entropy::extract_prefix;
use crate::error::{Error, Result};
use crate::image_io;
use crate::model::CompassModel;
use crate::pipeline;

use super::bicubic_resize;
use super::metrics::{mse, psnr_from_mse};

/// One measured layer of one encoded image.
#[derive(Debug, Clone)]
pub struct RDRecord {
    pub image: String,
    /// Index of the rate point (model) in the sweep.
    pub lambda_index: usize,
    pub layer: usize,
    /// Size of this layer's own substream, in bits.
    pub bits: u64,
    /// Exact size of the stream prefix that decodes this layer — header plus
    /// all substreams up to and including it.
    pub acc_bits: u64,
    /// `acc_bits` over this layer's pixel count.
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
}

/// Aggregate final-layer operating point of one model over a dataset.
#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub lambda_index: usize,
    pub mean_bpp: f64,
    pub mean_psnr: f64,
}

/// All measurements of a sweep over a dataset.
#[derive(Debug, Clone)]
pub struct DatasetEval {
    pub records: Vec<RDRecord>,
    /// One aggregate point per model, in input order.
    pub points: Vec<CurvePoint>,
}

/// Build ground-truth layers for `image` from scale factors relative to the
/// base layer. `scales` lists the enhancement layers in increasing order; the
/// last one corresponds to the full-resolution input, so layer `k < K` has
/// dimensions `round(dims · s_k / s_K)` and layer `K` is the input itself.
pub fn pyramid_targets(image: &Array3<f64>, scales: &[f64]) -> Result<Vec<Array3<f64>>> {
    if scales.is_empty() {
        return Ok(vec![image.clone()]);
    }
    for (i, &s) in scales.iter().enumerate() {
        if !(s > 1.0) || !s.is_finite() {
            return Err(Error::invalid(format!(
                "scale factors must be finite and > 1, got {s}"
            )));
        }
        if i > 0 && s <= scales[i - 1] {
            return Err(Error::invalid("scale factors must be strictly increasing"));
        }
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let top = *scales.last().expect("nonempty");
    let dims_for = |s: f64| {
        (
            ((h as f64 * s / top).round() as usize).max(1),
            ((w as f64 * s / top).round() as usize).max(1),
        )
    };
    let mut layers = Vec::with_capacity(scales.len() + 1);
    let (h0, w0) = dims_for(1.0);
    layers.push(bicubic_resize(image, h0, w0).mapv(|v| v.clamp(0.0, 1.0)));
    for &s in &scales[..scales.len() - 1] {
        let (hk, wk) = dims_for(s);
        layers.push(bicubic_resize(image, hk, wk).mapv(|v| v.clamp(0.0, 1.0)));
    }
    layers.push(image.clone());
    Ok(layers)
}

/// Encode one image's pyramid and measure every layer. Returns the records
/// and the final layer's `(bpp, psnr)` operating point.
pub fn evaluate_image(
    model: &CompassModel,
    lambda_index: usize,
    name: &str,
    image: &Array3<f64>,
    scales: &[f64],
) -> Result<(Vec<RDRecord>, (f64, f64))> {
    let quality = u8::try_from(lambda_index)
        .map_err(|_| Error::invalid("lambda index must fit in one byte"))?;
    let targets = pyramid_targets(image, scales)?;
    let out = pipeline::encode(model, &targets, quality)?;
    let mut records = Vec::with_capacity(targets.len());
    for (k, stat) in out.stats.iter().enumerate() {
        let acc_bits = 8 * extract_prefix(&out.stream, k)?.len() as u64;
        let pixels = (stat.height * stat.width) as f64;
        let m = mse(&out.recons[k], &targets[k])?;
        records.push(RDRecord {
            image: name.to_string(),
            lambda_index,
            layer: k,
            bits: stat.substream_bits,
            acc_bits,
            bpp: acc_bits as f64 / pixels,
            mse: m,
            psnr: psnr_from_mse(m),
        });
    }
    let last = records.last().expect("at least one layer");
    let point = (last.bpp, last.psnr);
    Ok((records, point))
}

/// Load every PNG/PPM-family image in `dir`, skipping unreadable files with
/// a warning on stderr. Errors when nothing loads.
pub fn load_eval_images(dir: &Path) -> Result<Vec<(String, Array3<f64>)>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| {
                    matches!(
                        e.to_ascii_lowercase().as_str(),
                        "png" | "ppm" | "pgm" | "pbm" | "pnm"
                    )
                })
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in paths {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match image_io::load_image(&p) {
            Ok(img) => images.push((name, img)),
            Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!(
            "no readable images in {}",
            dir.display()
        )));
    }
    Ok(images)
}

/// Evaluate every model over every image; aggregate points average the final
/// layer's bpp and PSNR across images.
pub fn evaluate_dataset(
    images: &[(String, Array3<f64>)],
    models: &[(usize, &CompassModel)],
    scales: &[f64],
) -> Result<DatasetEval> {
    if images.is_empty() {
        return Err(Error::Dataset("no images to evaluate".into()));
    }
    if models.is_empty() {
        return Err(Error::invalid("no models to evaluate"));
    }
    let mut records = Vec::new();
    let mut points = Vec::new();
    for &(lambda_index, model) in models {
        let mut bpp_sum = 0.0;
        let mut psnr_sum = 0.0;
        for (name, img) in images {
            let (recs, (bpp, psnr)) = evaluate_image(model, lambda_index, name, img, scales)?;
            records.extend(recs);
            bpp_sum += bpp;
            psnr_sum += psnr;
        }
        points.push(CurvePoint {
            lambda_index,
            mean_bpp: bpp_sum / images.len() as f64,
            mean_psnr: psnr_sum / images.len() as f64,
        });
    }
    Ok(DatasetEval { records, points })
}

/// Write records as CSV: `image,lambda,layer,bits,acc_bits,bpp,mse,psnr`.
pub fn write_records(path: &Path, records: &[RDRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Dataset(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(["image", "lambda", "layer", "bits", "acc_bits", "bpp", "mse", "psnr"])
        .map_err(|e| Error::Dataset(format!("report write failed: {e}")))?;
    for r in records {
        w.write_record(&[
            r.image.clone(),
            r.lambda_index.to_string(),
            r.layer.to_string(),
            r.bits.to_string(),
            r.acc_bits.to_string(),
            format!("{:.6}", r.bpp),
            format!("{:.8e}", r.mse),
            format!("{:.4}", r.psnr),
        ])
        .map_err(|e| Error::Dataset(format!("report write failed: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Dataset(format!("report write failed: {e}")))?;
    Ok(())
}
