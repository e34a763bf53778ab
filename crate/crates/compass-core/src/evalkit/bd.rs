//! Bjøntegaard rate difference between two rate–quality curves.
//!
//! Each curve's `log2(bpp)` is fitted as a cubic polynomial in PSNR; the
//! average vertical gap between the two fits over the curves' common PSNR
//! interval is the log-rate delta Δ, reported as `(2^Δ − 1) · 100` percent.
//! Negative results mean the test curve spends fewer bits at equal quality.

use crate::error::{Error, Result};

/// A rate–quality curve: `(bpp, psnr)` points with strictly increasing bpp.
#[derive(Debug, Clone)]
pub struct RateCurve {
    points: Vec<(f64, f64)>,
}

impl RateCurve {
    /// At least four points (a cubic fit needs them), strictly increasing
    /// positive bpp, finite PSNR.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::invalid(format!(
                "rate curves need at least 4 points, got {}",
                points.len()
            )));
        }
        for (i, &(bpp, psnr)) in points.iter().enumerate() {
            if !(bpp > 0.0) || !bpp.is_finite() || !psnr.is_finite() {
                return Err(Error::invalid(format!(
                    "invalid curve point #{i}: ({bpp}, {psnr})"
                )));
            }
            if i > 0 && bpp <= points[i - 1].0 {
                return Err(Error::invalid(
                    "curve bpp values must be strictly increasing",
                ));
            }
        }
        Ok(RateCurve { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    fn psnr_range(&self) -> (f64, f64) {
        let lo = self.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = self
            .points
            .iter()
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Cubic `y(x)` fitted by least squares in a mean-centered basis (centering
/// keeps the normal equations well conditioned for PSNR-scale abscissae).
pub(crate) struct CubicFit {
    shift: f64,
    c: [f64; 4],
}

impl CubicFit {
    pub(crate) fn fit(xs: &[f64], ys: &[f64]) -> Result<CubicFit> {
        let n = xs.len();
        debug_assert_eq!(n, ys.len());
        let shift = xs.iter().sum::<f64>() / n as f64;
        // Normal equations A c = b with A[j][k] = Σ x^(j+k), b[j] = Σ y·x^j.
        let mut pow_sum = [0.0f64; 7];
        let mut b = [0.0f64; 4];
        for (&x0, &y) in xs.iter().zip(ys) {
            let x = x0 - shift;
            let mut p = 1.0;
            for (j, ps) in pow_sum.iter_mut().enumerate() {
                *ps += p;
                if j < 4 {
                    b[j] += y * p;
                }
                p *= x;
            }
        }
        let mut a = [[0.0f64; 5]; 4];
        for (j, row) in a.iter_mut().enumerate() {
            for (k, cell) in row.iter_mut().take(4).enumerate() {
                *cell = pow_sum[j + k];
            }
            row[4] = b[j];
        }
        // Gaussian elimination with partial pivoting on the 4×5 tableau.
        for col in 0..4 {
            let piv = (col..4)
                .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
                .unwrap();
            if a[piv][col].abs() < 1e-9 * pow_sum[0].max(1.0) {
                return Err(Error::invalid(
                    "degenerate rate curve: quality values do not support a cubic fit",
                ));
            }
            a.swap(col, piv);
            for row in 0..4 {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for k in col..5 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        let mut c = [0.0f64; 4];
        for j in 0..4 {
            c[j] = a[j][4] / a[j][j];
        }
        Ok(CubicFit { shift, c })
    }

    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn eval(&self, x: f64) -> f64 {
        let u = x - self.shift;
        ((self.c[3] * u + self.c[2]) * u + self.c[1]) * u + self.c[0]
    }

    /// Exact integral of the fitted cubic over `[lo, hi]`.
    pub(crate) fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |x: f64| {
            let u = x - self.shift;
            (((self.c[3] / 4.0 * u + self.c[2] / 3.0) * u + self.c[1] / 2.0) * u + self.c[0]) * u
        };
        anti(hi) - anti(lo)
    }
}

pub(crate) fn fit_log_rate(curve: &RateCurve) -> Result<CubicFit> {
    let xs: Vec<f64> = curve.points().iter().map(|p| p.1).collect();
    let ys: Vec<f64> = curve.points().iter().map(|p| p.0.log2()).collect();
    CubicFit::fit(&xs, &ys)
}

/// Average log-rate difference of `test` over `anchor` across their common
/// PSNR interval, in percent. Errors when the quality ranges do not overlap.
pub fn bd_rate(anchor: &RateCurve, test: &RateCurve) -> Result<f64> {
    let (alo, ahi) = anchor.psnr_range();
    let (tlo, thi) = test.psnr_range();
    let lo = alo.max(tlo);
    let hi = ahi.min(thi);
    if !(hi > lo) {
        return Err(Error::invalid(format!(
            "rate curves share no quality range: [{alo:.3}, {ahi:.3}] vs [{tlo:.3}, {thi:.3}]"
        )));
    }
    let fa = fit_log_rate(anchor)?;
    let ft = fit_log_rate(test)?;
    let delta = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((delta.exp2() - 1.0) * 100.0)
}
