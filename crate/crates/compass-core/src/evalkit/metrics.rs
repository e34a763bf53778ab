//! Distortion metrics on `[0, 1]` image planes.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Cap applied to PSNR so lossless reconstructions report a finite value.
pub const PSNR_CAP: f64 = 100.0;

/// Mean squared error over all samples; the images must share a shape.
pub fn mse(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "mse needs equal shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len().max(1);
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64)
}

/// `−10·log10(mse)` for `[0, 1]`-range signals, capped at 100 dB.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}
