//! Image file loading and saving.
//!
//! Images are held in memory as `(H, W, 3)` arrays of `f64` in `[0, 1]`
//! (RGB, row-major). Files are read through the `image` crate (PNG and PNM
//! are enabled); grayscale sources are expanded to three channels on load.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// Loads an image file as an `(H, W, 3)` array scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = f64::from(p.0[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Quantizes one intensity to an 8-bit pixel value (clamp then round).
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves an `(H, W, 3)` array in `[0, 1]` to an image file; the format is
/// chosen from the file extension.
pub fn save_image(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "image to save must be (H>=1, W>=1, 3), got ({h}, {w}, {c})"
        )));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            p.0[ch] = to_u8(img[[y as usize, x as usize, ch]]);
        }
    }
    buf.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
