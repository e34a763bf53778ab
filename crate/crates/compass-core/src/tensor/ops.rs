//! Plain (non-tracked) tensor kernels.
//!
//! These are the single source of truth for forward math; the tape in
//! [`super::graph`] calls the same functions, so tracked and untracked paths
//! produce bit-identical values.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

/// Output spatial size of a strided convolution over a zero-padded input.
#[inline]
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Zero-pad `x` spatially by `pad` on every side.
fn zero_pad(x: ArrayView3<f64>, pad: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::zeros((h + 2 * pad, w + 2 * pad, c));
    out.slice_mut(ndarray::s![pad..pad + h, pad..pad + w, ..])
        .assign(&x);
    out
}

/// Gather sliding windows into a `(out_h * out_w, kh * kw * c)` matrix.
///
/// Column order is `(ky, kx, c)` with `c` fastest, matching a flattened
/// `(out, kh, kw, in)` kernel.
pub fn im2col(
    x: ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (h, w, c) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let xp: ndarray::CowArray<f64, ndarray::Ix3> = if pad == 0 {
        x.as_standard_layout()
    } else {
        ndarray::CowArray::from(zero_pad(x, pad))
    };
    let xs = xp.as_slice().expect("standardized input has a slice");
    let wp = w + 2 * pad;
    let mut cols = Array2::zeros((oh * ow, kh * kw * c));
    {
        let cs = cols.as_slice_mut().expect("fresh array is standard layout");
        let row_len = kh * kw * c;
        for i in 0..oh {
            for j in 0..ow {
                let row = (i * ow + j) * row_len;
                for ky in 0..kh {
                    let src = ((i * stride + ky) * wp + j * stride) * c;
                    let dst = row + ky * kw * c;
                    // kw contiguous columns of c channels each
                    cs[dst..dst + kw * c].copy_from_slice(&xs[src..src + kw * c]);
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter-add columns back onto the padded input grid; inverse layout of
/// [`im2col`]. Returns the unpadded `(h, w, c)` gradient.
pub fn col2im(
    cols: ArrayView2<f64>,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut xp = Array3::<f64>::zeros((hp, wp, c));
    {
        let xs = xp.as_slice_mut().unwrap();
        let row_len = kh * kw * c;
        let owned;
        let cs = match cols.as_slice() {
            Some(s) => s,
            None => {
                owned = cols.to_owned();
                owned.as_slice().unwrap()
            }
        };
        for i in 0..oh {
            for j in 0..ow {
                let row = (i * ow + j) * row_len;
                for ky in 0..kh {
                    let dst = ((i * stride + ky) * wp + j * stride) * c;
                    let src = row + ky * kw * c;
                    for t in 0..kw * c {
                        xs[dst + t] += cs[src + t];
                    }
                }
            }
        }
    }
    if pad == 0 {
        xp
    } else {
        xp.slice(ndarray::s![pad..pad + h, pad..pad + w, ..]).to_owned()
    }
}

/// 2-D convolution, channels-last, zero padding. `w` is `(out, kh, kw, in)`.
pub fn conv2d(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (o, kh, kw, ci) = w.dim();
    debug_assert_eq!(ci, x.dim().2, "kernel/input channel mismatch");
    let (cols, oh, ow) = im2col(x, kh, kw, stride, pad);
    let wf = w.to_shape((o, kh * kw * ci)).unwrap();
    let mut y = cols.dot(&wf.t());
    if let Some(b) = b {
        y += &b.view().insert_axis(Axis(0));
    }
    y.into_shape_with_order((oh, ow, o)).unwrap()
}

/// Gradient of [`conv2d`] w.r.t. its input.
pub fn conv2d_grad_input(
    gy: ArrayView3<f64>,
    w: ArrayView4<f64>,
    in_h: usize,
    in_w: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (o, kh, kw, ci) = w.dim();
    let (oh, ow, go) = gy.dim();
    debug_assert_eq!(go, o);
    let gs = gy.as_standard_layout();
    let gf = gs.to_shape((oh * ow, o)).unwrap();
    let wf = w.to_shape((o, kh * kw * ci)).unwrap();
    let dcols = gf.dot(&wf);
    col2im(dcols.view(), in_h, in_w, ci, kh, kw, stride, pad, oh, ow)
}

/// Gradient of [`conv2d`] w.r.t. its kernel.
pub fn conv2d_grad_kernel(
    x: ArrayView3<f64>,
    gy: ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let ci = x.dim().2;
    let (oh, ow, o) = gy.dim();
    let (cols, coh, cow) = im2col(x, kh, kw, stride, pad);
    debug_assert_eq!((coh, cow), (oh, ow));
    let gs = gy.as_standard_layout();
    let gf = gs.to_shape((oh * ow, o)).unwrap();
    let dw = gf.t().dot(&cols); // (o, kh*kw*ci)
    dw.into_shape_with_order((o, kh, kw, ci)).unwrap()
}

/// Output spatial size of a transposed convolution.
#[inline]
pub fn deconv_out_len(len: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (len - 1) * stride + k + out_pad - 2 * pad
}

/// Transposed 2-D convolution: the adjoint of a stride-`stride` convolution.
///
/// `wm` is the kernel of that mirrored convolution, stored `(in, kh, kw, out)`
/// where `in` is this op's input channel count.
pub fn conv2d_transpose(
    x: ArrayView3<f64>,
    wm: ArrayView4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Array3<f64> {
    let (i, kh, kw, o) = wm.dim();
    let (h, w, xi) = x.dim();
    debug_assert_eq!(xi, i, "kernel/input channel mismatch");
    let oh = deconv_out_len(h, kh, stride, pad, out_pad);
    let ow = deconv_out_len(w, kw, stride, pad, out_pad);
    let xs = x.as_standard_layout();
    let xf = xs.to_shape((h * w, i)).unwrap();
    let wf = wm.to_shape((i, kh * kw * o)).unwrap();
    let dcols = xf.dot(&wf);
    let mut y = col2im(dcols.view(), oh, ow, o, kh, kw, stride, pad, h, w);
    if let Some(b) = b {
        y += &b.view().insert_axis(Axis(0)).insert_axis(Axis(0));
    }
    y
}

/// Replicate-pad `x` by `pb` rows at the bottom and `pr` columns at the right.
pub fn replicate_pad_br(x: ArrayView3<f64>, pb: usize, pr: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::zeros((h + pb, w + pr, c));
    out.slice_mut(ndarray::s![..h, ..w, ..]).assign(&x);
    for e in 0..pb {
        let row = x.index_axis(Axis(0), h - 1).to_owned();
        out.slice_mut(ndarray::s![h + e, ..w, ..]).assign(&row);
    }
    for e in 0..pr {
        let col = out.slice(ndarray::s![.., w - 1, ..]).to_owned();
        out.slice_mut(ndarray::s![.., w + e, ..]).assign(&col);
    }
    out
}

/// 3x3 neighborhood concatenation with zero border.
///
/// Output channel `c * 9 + widx` holds input channel `c` shifted by window
/// offset `widx = (dy + 1) * 3 + (dx + 1)`; the center of the window is
/// `widx == 4`.
pub fn unfold3(x: ArrayView3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::zeros((h, w, c * 9));
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let widx = ((dy + 1) * 3 + (dx + 1)) as usize;
            for i in 0..h as i64 {
                let si = i + dy;
                if si < 0 || si >= h as i64 {
                    continue;
                }
                for j in 0..w as i64 {
                    let sj = j + dx;
                    if sj < 0 || sj >= w as i64 {
                        continue;
                    }
                    for ch in 0..c {
                        out[(i as usize, j as usize, ch * 9 + widx)] =
                            x[(si as usize, sj as usize, ch)];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold3`].
pub fn unfold3_grad(g: ArrayView3<f64>, h: usize, w: usize, c: usize) -> Array3<f64> {
    let mut dx = Array3::zeros((h, w, c));
    for dy in -1i64..=1 {
        for dx_ in -1i64..=1 {
            let widx = ((dy + 1) * 3 + (dx_ + 1)) as usize;
            for i in 0..h as i64 {
                let si = i + dy;
                if si < 0 || si >= h as i64 {
                    continue;
                }
                for j in 0..w as i64 {
                    let sj = j + dx_;
                    if sj < 0 || sj >= w as i64 {
                        continue;
                    }
                    for ch in 0..c {
                        dx[(si as usize, sj as usize, ch)] +=
                            g[(i as usize, j as usize, ch * 9 + widx)];
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor gather through precomputed per-axis index maps.
pub fn upsample_nearest(x: ArrayView3<f64>, rows: &[usize], cols: &[usize]) -> Array3<f64> {
    let c = x.dim().2;
    let mut out = Array3::zeros((rows.len(), cols.len(), c));
    for (i, &si) in rows.iter().enumerate() {
        for (j, &sj) in cols.iter().enumerate() {
            for ch in 0..c {
                out[(i, j, ch)] = x[(si, sj, ch)];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`] (scatter-add).
pub fn upsample_nearest_grad(
    g: ArrayView3<f64>,
    rows: &[usize],
    cols: &[usize],
    h: usize,
    w: usize,
) -> Array3<f64> {
    let c = g.dim().2;
    let mut dx = Array3::zeros((h, w, c));
    for (i, &si) in rows.iter().enumerate() {
        for (j, &sj) in cols.iter().enumerate() {
            for ch in 0..c {
                dx[(si, sj, ch)] += g[(i, j, ch)];
            }
        }
    }
    dx
}

/// Numerically stable softplus.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for initialization.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1), stable for small y
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(t: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    (-0.5 * t * t).exp() * INV_SQRT_2PI
}
