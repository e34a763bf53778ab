//! Separable Catmull-Rom bicubic resampling (a = -0.5) with edge replication.
//!
//! Target pixel centers map to source coordinates by the pixel-center
//! convention `x = (t + 0.5) * src / dst - 0.5`; each output sample blends the
//! four nearest source samples per axis, clamping tap indices at the borders.
//! The kernel is a partition of unity, so constant inputs are preserved.

use ndarray::{Array3, ArrayView3};

/// Catmull-Rom kernel weight at distance `d` (a = -0.5).
#[inline]
pub fn kernel(d: f64) -> f64 {
    let x = d.abs();
    if x <= 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

/// Per-target tap indices (clamped to the source range) and weights.
pub fn axis_plan(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    assert!(src >= 1 && dst >= 1);
    (0..dst)
        .map(|t| {
            let x = (t as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
            let base = x.floor() as i64 - 1;
            let mut idx = [0usize; 4];
            let mut wt = [0f64; 4];
            for k in 0..4 {
                let i = base + k as i64;
                idx[k] = i.clamp(0, src as i64 - 1) as usize;
                wt[k] = kernel(x - i as f64);
            }
            (idx, wt)
        })
        .collect()
}

fn resize_axis0(x: ArrayView3<f64>, plan: &[([usize; 4], [f64; 4])]) -> Array3<f64> {
    let (_, w, c) = x.dim();
    let mut out = Array3::zeros((plan.len(), w, c));
    for (t, (idx, wt)) in plan.iter().enumerate() {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * x[(idx[k], j, ch)];
                }
                out[(t, j, ch)] = acc;
            }
        }
    }
    out
}

fn resize_axis1(x: ArrayView3<f64>, plan: &[([usize; 4], [f64; 4])]) -> Array3<f64> {
    let (h, _, c) = x.dim();
    let mut out = Array3::zeros((h, plan.len(), c));
    for i in 0..h {
        for (t, (idx, wt)) in plan.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * x[(i, idx[k], ch)];
                }
                out[(i, t, ch)] = acc;
            }
        }
    }
    out
}

/// Resize `(h, w, c)` to `(oh, ow, c)`, rows pass then columns pass.
pub fn resize(x: ArrayView3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, _) = x.dim();
    let rows = axis_plan(h, oh);
    let cols = axis_plan(w, ow);
    let tmp = resize_axis0(x, &rows);
    resize_axis1(tmp.view(), &cols)
}

fn adj_axis0(g: ArrayView3<f64>, plan: &[([usize; 4], [f64; 4])], src: usize) -> Array3<f64> {
    let (_, w, c) = g.dim();
    let mut out = Array3::zeros((src, w, c));
    for (t, (idx, wt)) in plan.iter().enumerate() {
        for j in 0..w {
            for ch in 0..c {
                let gv = g[(t, j, ch)];
                for k in 0..4 {
                    out[(idx[k], j, ch)] += wt[k] * gv;
                }
            }
        }
    }
    out
}

fn adj_axis1(g: ArrayView3<f64>, plan: &[([usize; 4], [f64; 4])], src: usize) -> Array3<f64> {
    let (h, _, c) = g.dim();
    let mut out = Array3::zeros((h, src, c));
    for i in 0..h {
        for (t, (idx, wt)) in plan.iter().enumerate() {
            for ch in 0..c {
                let gv = g[(i, t, ch)];
                for k in 0..4 {
                    out[(i, idx[k], ch)] += wt[k] * gv;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize`] for gradient propagation.
pub fn resize_adjoint(g: ArrayView3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (oh, ow, _) = g.dim();
    let rows = axis_plan(in_h, oh);
    let cols = axis_plan(in_w, ow);
    let tmp = adj_axis1(g, &cols, in_w);
    adj_axis0(tmp.view(), &rows, in_h)
}
