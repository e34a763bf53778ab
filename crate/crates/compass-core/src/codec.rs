//! The transform stack shared by the base-layer and residual codecs.
//!
//! Analysis: a stack of stride-2 5x5 convolutions with divisive normalization
//! between stages. Synthesis mirrors it with transposed convolutions and
//! multiplicative (inverse) normalization. A hyper path maps the latent `y`
//! to a side latent `z` and back to per-element mean/scale parameters of the
//! Gaussian entropy model. `z` itself is priced by a learned per-channel
//! factorized prior.
//!
//! Odd spatial extents are handled by explicit replicate padding so every
//! stride-2 stage sees even dims; the decoder recomputes the same integer
//! `PadPlan` from the signaled image dims and crops stage by stage, so no
//! side information is needed.

use ndarray::ArrayD;

use crate::model::{ModelConfig, PaddingMode, SIGMA_MIN};
use crate::params::{Bound, Params};
use crate::tensor::ops::{sigmoid, softplus};
use crate::tensor::{Graph, Var};

/// Negative slope of the leaky activations in the hyper path.
const LEAKY_SLOPE: f64 = 0.01;

/// Integer padding bookkeeping for one stride-2 conv stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadPlan {
    /// One-shot replicate padding applied before the first stage.
    pub pre: (usize, usize),
    /// Per-stage `(pad_bottom, pad_right)` flags for odd extents.
    pub steps: Vec<(bool, bool)>,
}

impl PadPlan {
    /// Plan for an input of `(h, w)` through `stages` stride-2 stages.
    pub fn new(mode: PaddingMode, h: usize, w: usize, stages: usize) -> Self {
        match mode {
            PaddingMode::Layerwise => {
                let (mut ch, mut cw) = (h, w);
                let mut steps = Vec::with_capacity(stages);
                for _ in 0..stages {
                    let (pb, pr) = (ch % 2 == 1, cw % 2 == 1);
                    steps.push((pb, pr));
                    ch = (ch + pb as usize) / 2;
                    cw = (cw + pr as usize) / 2;
                }
                PadPlan { pre: (0, 0), steps }
            }
            PaddingMode::Lump => {
                let unit = 1usize << stages;
                let pad = |n: usize| (unit - n % unit) % unit;
                PadPlan { pre: (pad(h), pad(w)), steps: vec![(false, false); stages] }
            }
        }
    }

    /// Spatial dims after all stages.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (mut ch, mut cw) = (h + self.pre.0, w + self.pre.1);
        for &(pb, pr) in &self.steps {
            ch = (ch + pb as usize) / 2;
            cw = (cw + pr as usize) / 2;
        }
        (ch, cw)
    }
}

/// Pad plans and derived latent dims for one coded plane of `(h, w)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimPlan {
    pub main: PadPlan,
    pub hyper: PadPlan,
    /// Dims of the latent `y`.
    pub y: (usize, usize),
    /// Dims of the hyper latent `z`.
    pub z: (usize, usize),
}

/// Derive every padding decision and latent shape from the image dims alone.
pub fn dim_plan(cfg: &ModelConfig, h: usize, w: usize) -> DimPlan {
    let main = PadPlan::new(cfg.padding, h, w, cfg.stages);
    let y = main.output_dims(h, w);
    let hyper = PadPlan::new(cfg.padding, y.0, y.1, cfg.hyper_stages);
    let z = hyper.output_dims(y.0, y.1);
    DimPlan { main, hyper, y, z }
}

/// Divisive normalization: each channel is scaled by an inverse (or forward,
/// for `inverse = true`) square root of a learned quadratic form over all
/// channel energies at the same pixel.
fn gdn(g: &Graph, b: &Bound, prefix: &str, x: Var, inverse: bool) -> Var {
    let shape = g.shape(x);
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let x2 = g.reshape(x, &[h * w, c]);
    let beta = g.add_scalar(g.softplus(b.var(&format!("{prefix}.beta_raw"))), 1e-6);
    let gamma = g.softplus(b.var(&format!("{prefix}.gamma_raw")));
    let energy = g.add_row(g.matmul(g.square(x2), gamma), beta);
    let y = if inverse {
        g.mul(x2, g.sqrt(energy))
    } else {
        g.mul(x2, g.rsqrt(energy))
    };
    g.reshape(y, &[h, w, c])
}

/// Image/residual → latent `y`.
pub fn analysis(g: &Graph, b: &Bound, prefix: &str, cfg: &ModelConfig, plan: &DimPlan, x: Var) -> Var {
    let mut cur = g.replicate_pad_br(x, plan.main.pre.0, plan.main.pre.1);
    for s in 0..cfg.stages {
        let (pb, pr) = plan.main.steps[s];
        cur = g.replicate_pad_br(cur, pb as usize, pr as usize);
        cur = g.conv2d(
            cur,
            b.var(&format!("{prefix}.ga.{s}.w")),
            Some(b.var(&format!("{prefix}.ga.{s}.b"))),
            2,
            2,
        );
        if s + 1 < cfg.stages {
            cur = gdn(g, b, &format!("{prefix}.ga.gdn{s}"), cur, false);
        }
    }
    cur
}

/// Quantized latent → image/residual plane of the planned dims.
pub fn synthesis(g: &Graph, b: &Bound, prefix: &str, cfg: &ModelConfig, plan: &DimPlan, y: Var) -> Var {
    let mut cur = y;
    for s in 0..cfg.stages {
        cur = g.conv2d_transpose(
            cur,
            b.var(&format!("{prefix}.gs.{s}.w")),
            Some(b.var(&format!("{prefix}.gs.{s}.b"))),
            2,
            2,
            1,
        );
        // undo the padding of the mirrored analysis stage
        let (pb, pr) = plan.main.steps[cfg.stages - 1 - s];
        cur = g.crop_br(cur, pb as usize, pr as usize);
        if s + 1 < cfg.stages {
            cur = gdn(g, b, &format!("{prefix}.gs.igdn{s}"), cur, true);
        }
    }
    g.crop_br(cur, plan.main.pre.0, plan.main.pre.1)
}

/// Latent `y` → hyper latent `z` (from the clean, unquantized latent).
pub fn hyper_analysis(
    g: &Graph,
    b: &Bound,
    prefix: &str,
    cfg: &ModelConfig,
    plan: &DimPlan,
    y: Var,
) -> Var {
    let mut cur = g.conv2d(
        y,
        b.var(&format!("{prefix}.ha.0.w")),
        Some(b.var(&format!("{prefix}.ha.0.b"))),
        1,
        1,
    );
    cur = g.leaky_relu(cur, LEAKY_SLOPE);
    cur = g.replicate_pad_br(cur, plan.hyper.pre.0, plan.hyper.pre.1);
    for s in 0..cfg.hyper_stages {
        let (pb, pr) = plan.hyper.steps[s];
        cur = g.replicate_pad_br(cur, pb as usize, pr as usize);
        cur = g.conv2d(
            cur,
            b.var(&format!("{prefix}.ha.{}.w", s + 1)),
            Some(b.var(&format!("{prefix}.ha.{}.b", s + 1))),
            2,
            2,
        );
        if s + 1 < cfg.hyper_stages {
            cur = g.leaky_relu(cur, LEAKY_SLOPE);
        }
    }
    cur
}

/// Quantized hyper latent → per-element `(mean, scale)` of the latent model.
/// Scale is `SIGMA_MIN` plus the squared raw head output, so it is strictly
/// positive and hits the floor only when the raw output is exactly zero.
pub fn hyper_synthesis(
    g: &Graph,
    b: &Bound,
    prefix: &str,
    cfg: &ModelConfig,
    plan: &DimPlan,
    z: Var,
) -> (Var, Var) {
    let mut cur = z;
    for s in 0..cfg.hyper_stages {
        cur = g.conv2d_transpose(
            cur,
            b.var(&format!("{prefix}.hs.{s}.w")),
            Some(b.var(&format!("{prefix}.hs.{s}.b"))),
            2,
            2,
            1,
        );
        let (pb, pr) = plan.hyper.steps[cfg.hyper_stages - 1 - s];
        cur = g.crop_br(cur, pb as usize, pr as usize);
        cur = g.leaky_relu(cur, LEAKY_SLOPE);
    }
    cur = g.crop_br(cur, plan.hyper.pre.0, plan.hyper.pre.1);
    let head = cfg.hyper_stages;
    cur = g.conv2d(
        cur,
        b.var(&format!("{prefix}.hs.{head}.w")),
        Some(b.var(&format!("{prefix}.hs.{head}.b"))),
        1,
        1,
    );
    let n = cfg.latent_channels;
    let mu = g.slice_last(cur, 0, n);
    let sigma_half = g.slice_last(cur, n, 2 * n);
    let sigma = g.add_scalar(g.square(sigma_half), SIGMA_MIN);
    (mu, sigma)
}

// ---- factorized prior over the hyper latent --------------------------------

/// CDF of one prior channel evaluated on a `(n, 1)` column of positions.
/// Monotone by construction: nonnegative matrix weights (softplus), gated
/// tanh couplings with gate > -1, and a final sigmoid.
fn z_cdf(g: &Graph, b: &Bound, prefix: &str, c: usize, t: Var) -> Var {
    let mut cur = t;
    for (layer, has_gate) in [(1, true), (2, true), (3, false)] {
        let hm = g.softplus(g.index_axis0(b.var(&format!("{prefix}.zp.h{layer}")), c));
        let bias = g.index_axis0(b.var(&format!("{prefix}.zp.b{layer}")), c);
        cur = g.add_row(g.matmul(cur, hm), bias);
        if has_gate {
            let gate = g.tanh(g.index_axis0(b.var(&format!("{prefix}.zp.a{layer}")), c));
            let gated = g.mul_row(g.tanh(cur), gate);
            cur = g.add(cur, gated);
        }
    }
    g.sigmoid(cur)
}

/// Total code length in bits of a hyper latent `(zh, zw, M)` under the
/// factorized prior, with per-element probability floored at 2^-30.
pub fn z_prior_bits(g: &Graph, b: &Bound, prefix: &str, z: Var) -> Var {
    let shape = g.shape(z);
    let (zh, zw, m) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(z, &[zh * zw, m]);
    let mut total: Option<Var> = None;
    for c in 0..m {
        let col = g.slice_last(flat, c, c + 1);
        let hi = z_cdf(g, b, prefix, c, g.add_scalar(col, 0.5));
        let lo = z_cdf(g, b, prefix, c, g.add_scalar(col, -0.5));
        let p = g.clamp_min_const(g.sub(hi, lo), crate::tensor::graph::P_MIN);
        let bits = g.mul_scalar(g.sum_all(g.log2(p)), -1.0);
        total = Some(match total {
            Some(t) => g.add(t, bits),
            None => bits,
        });
    }
    total.expect("hyper latent must have at least one channel")
}

/// Plain (non-tape) evaluation of one prior channel's CDF, used to build the
/// integer coding tables. Encoder and decoder share this exact routine, which
/// is all that bit-exactness requires.
pub fn z_cdf_plain(params: &Params, prefix: &str, c: usize, t: f64) -> f64 {
    let get = |name: &str| params.get(&format!("{prefix}.{name}")).expect("prior parameter");
    let h1 = get("zp.h1");
    let b1 = get("zp.b1");
    let a1 = get("zp.a1");
    let h2 = get("zp.h2");
    let b2 = get("zp.b2");
    let a2 = get("zp.a2");
    let h3 = get("zp.h3");
    let b3 = get("zp.b3");

    // layer 1: 1 -> 3
    let mut u = [0.0f64; 3];
    for j in 0..3 {
        u[j] = softplus(h1[[c, 0, j]]) * t + b1[[c, j]];
        u[j] += a1[[c, j]].tanh() * u[j].tanh();
    }
    // layer 2: 3 -> 3
    let mut v = [0.0f64; 3];
    for j in 0..3 {
        let mut acc = b2[[c, j]];
        for i in 0..3 {
            acc += softplus(h2[[c, i, j]]) * u[i];
        }
        v[j] = acc + a2[[c, j]].tanh() * acc.tanh();
    }
    // layer 3: 3 -> 1
    let mut w = b3[[c, 0]];
    for i in 0..3 {
        w += softplus(h3[[c, i, 0]]) * v[i];
    }
    sigmoid(w)
}

/// Integer-bin probability of value `v` in prior channel `c`.
pub fn z_bin_prob_plain(params: &Params, prefix: &str, c: usize, v: f64) -> f64 {
    z_cdf_plain(params, prefix, c, v + 0.5) - z_cdf_plain(params, prefix, c, v - 0.5)
}

/// Round half away from zero, elementwise (plain array helper).
pub fn round_plain(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(f64::round)
}
