//! Evaluation harness: PSNR/bpp measurements, Bjøntegaard rate comparison,
//! ground-truth pyramid construction, and CSV report emission.
//!
//! The conventions match the codec's layered decoding story: the rate charged
//! to a layer is the exact size of the stream prefix needed to decode it
//! (header plus all substreams up to that layer), and quality is RGB PSNR on
//! `[0, 1]` samples against bicubically resampled ground truth.

pub mod bd;
pub mod metrics;
pub mod report;

pub use bd::{bd_rate, RateCurve};
pub use metrics::{mse, psnr, psnr_from_mse};
pub use report::{
    evaluate_dataset, evaluate_image, load_eval_images, pyramid_targets, write_records,
    CurvePoint, DatasetEval, RDRecord,
};

use ndarray::Array3;

/// Separable Catmull-Rom bicubic resize (a = −0.5) with edge replication;
/// the reference resampler for ground-truth pyramids.
pub fn bicubic_resize(img: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    crate::tensor::resample::resize(img.view(), h, w)
}
