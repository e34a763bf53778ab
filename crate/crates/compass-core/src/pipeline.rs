//! Layered encode/decode pipeline.
//!
//! A stream carries K+1 versions of an image at non-decreasing sizes. The
//! base layer (layer 0, the smallest) is coded directly with the image
//! codec. Every enhancement layer k >= 1 is coded as a residual: the decoder
//! first predicts layer k from the already reconstructed layer k-1 (either
//! with the learned arbitrary-scale predictor or with bicubic resampling),
//! then adds the decoded residual and clamps to `[0, 1]`. One shared
//! predictor and one shared residual codec serve all enhancement layers.
//!
//! The encoder mirrors the decoder exactly: it reconstructs each layer from
//! the quantized latents the decoder will see, so encoder-side
//! reconstructions equal decoder-side reconstructions bit-for-bit, and any
//! stream prefix decodes its layers identically to the full stream.

use ndarray::{Array3, ArrayD, Ix3};

use crate::codec::{
    analysis, dim_plan, hyper_analysis, hyper_synthesis, synthesis, z_prior_bits,
};
use crate::entropy::container::{self, LayerSubstream, StreamHeader};
use crate::entropy::latent::{
    decode_channel_plane, decode_gaussian_plane, encode_channel_plane, encode_gaussian_plane,
    estimate_gaussian_plane_bits,
};
use crate::entropy::tables::z_channel_tables;
use crate::error::{Error, Result};
use crate::liff;
use crate::model::{CompassModel, PredictorKind};
use crate::params::Bound;
use crate::tensor::{Graph, Var};

/// Per-layer size and rate bookkeeping from an encode pass.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub height: usize,
    pub width: usize,
    /// Model estimate of the main-latent code length, in bits.
    pub estimated_y_bits: f64,
    /// Model estimate of the hyper-latent code length, in bits.
    pub estimated_z_bits: f64,
    /// Entropy-coded payload sizes actually produced, in bits.
    pub actual_y_bits: u64,
    pub actual_z_bits: u64,
    /// Full substream size including framing and checksum, in bits.
    pub substream_bits: u64,
}

impl LayerStats {
    pub fn estimated_bits(&self) -> f64 {
        self.estimated_y_bits + self.estimated_z_bits
    }

    pub fn actual_payload_bits(&self) -> u64 {
        self.actual_y_bits + self.actual_z_bits
    }
}

/// Result of encoding an image pyramid.
pub struct EncodeOutput {
    /// Complete serialized stream.
    pub stream: Vec<u8>,
    /// Per-layer reconstructions exactly as the decoder will produce them.
    pub recons: Vec<Array3<f64>>,
    pub stats: Vec<LayerStats>,
}

/// Result of decoding a stream (possibly only a prefix of its layers).
pub struct DecodeOutput {
    pub header: StreamHeader,
    pub recons: Vec<Array3<f64>>,
}

fn to_image(a: &ArrayD<f64>) -> Array3<f64> {
    a.clone()
        .into_dimensionality::<Ix3>()
        .expect("pipeline tensors are (H, W, 3)")
}

/// One codec pass over `input` (image for the base layer, residual for
/// enhancement layers): quantized analysis, rate estimation, entropy coding,
/// and synthesis from the quantized latent.
struct CodedPass {
    substream: LayerSubstream,
    /// Synthesis output from the quantized latent, before any clamping or
    /// prediction add.
    recon_raw: Var,
    est_y_bits: f64,
    est_z_bits: f64,
}

fn encode_pass(
    g: &Graph,
    b: &Bound,
    model: &CompassModel,
    prefix: &str,
    input: Var,
    h: usize,
    w: usize,
) -> CodedPass {
    let cfg = &model.config;
    let plan = dim_plan(cfg, h, w);
    let y = analysis(g, b, prefix, cfg, &plan, input);
    let y_hat = g.round_ste(y);
    let z = hyper_analysis(g, b, prefix, cfg, &plan, y);
    let z_hat = g.round_ste(z);
    let (mu, sigma) = hyper_synthesis(g, b, prefix, cfg, &plan, z_hat);
    let est_z_bits = g.value(z_prior_bits(g, b, prefix, z_hat))[[]];
    let recon_raw = synthesis(g, b, prefix, cfg, &plan, y_hat);

    let s = cfg.symbol_range as u32;
    let z_tables = z_channel_tables(&model.params, prefix, cfg.hyper_channels, s);
    let z_bytes = encode_channel_plane(&g.value(z_hat), &z_tables, s);
    let (y_vals, mu_vals, sigma_vals) = (g.value(y_hat), g.value(mu), g.value(sigma));
    let est_y_bits = estimate_gaussian_plane_bits(&y_vals, &mu_vals, &sigma_vals, s);
    let y_bytes = encode_gaussian_plane(&y_vals, &mu_vals, &sigma_vals, s);
    CodedPass {
        substream: LayerSubstream {
            z: z_bytes,
            y: y_bytes,
        },
        recon_raw,
        est_y_bits,
        est_z_bits,
    }
}

fn decode_pass(
    g: &Graph,
    b: &Bound,
    model: &CompassModel,
    prefix: &str,
    sub: &LayerSubstream,
    h: usize,
    w: usize,
) -> Var {
    let cfg = &model.config;
    let plan = dim_plan(cfg, h, w);
    let s = cfg.symbol_range as u32;
    let z_tables = z_channel_tables(&model.params, prefix, cfg.hyper_channels, s);
    let z_hat_arr = decode_channel_plane(
        &sub.z,
        (plan.z.0, plan.z.1, cfg.hyper_channels),
        &z_tables,
        s,
    );
    let z_hat = g.input(z_hat_arr);
    let (mu, sigma) = hyper_synthesis(g, b, prefix, cfg, &plan, z_hat);
    let y_hat_arr = decode_gaussian_plane(&sub.y, &g.value(mu), &g.value(sigma), s);
    let y_hat = g.input(y_hat_arr);
    synthesis(g, b, prefix, cfg, &plan, y_hat)
}

/// Predicts layer-k pixels from the previous reconstruction.
fn predict_layer(
    g: &Graph,
    b: &Bound,
    model: &CompassModel,
    prev: Var,
    h: usize,
    w: usize,
) -> Var {
    match model.config.predictor {
        PredictorKind::Liff => liff::predict(g, b, &model.config.liff, prev, h, w),
        PredictorKind::Bicubic => g.resize_bicubic(prev, h, w),
    }
}

fn check_pyramid(images: &[Array3<f64>]) -> Result<Vec<(u16, u16)>> {
    if images.is_empty() {
        return Err(Error::invalid("need at least one layer image"));
    }
    if images.len() > usize::from(u8::MAX) {
        return Err(Error::invalid(format!("too many layers: {}", images.len())));
    }
    let mut dims = Vec::with_capacity(images.len());
    let mut prev = (0usize, 0usize);
    for (k, img) in images.iter().enumerate() {
        let (h, w, c) = img.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "layer {k} must be (H>=1, W>=1, 3), got ({h}, {w}, {c})"
            )));
        }
        if h < prev.0 || w < prev.1 {
            return Err(Error::invalid(format!(
                "layer {k} dims ({h}, {w}) must be >= previous layer dims ({}, {})",
                prev.0, prev.1
            )));
        }
        let hu = u16::try_from(h).map_err(|_| Error::invalid("height exceeds 65535"))?;
        let wu = u16::try_from(w).map_err(|_| Error::invalid("width exceeds 65535"))?;
        dims.push((hu, wu));
        prev = (h, w);
    }
    Ok(dims)
}

/// Encodes an image pyramid (smallest first) into a layered stream.
///
/// Returns the stream together with the per-layer reconstructions the
/// decoder will reproduce and the rate statistics of each layer.
pub fn encode(model: &CompassModel, images: &[Array3<f64>], quality_index: u8) -> Result<EncodeOutput> {
    let dims = check_pyramid(images)?;
    let g = Graph::inference();
    let b = model.params.bind(&g);
    let mut recons: Vec<Array3<f64>> = Vec::with_capacity(images.len());
    let mut recon_vars: Vec<Var> = Vec::with_capacity(images.len());
    let mut substreams = Vec::with_capacity(images.len());
    let mut stats = Vec::with_capacity(images.len());
    for (k, img) in images.iter().enumerate() {
        let (h, w, _) = img.dim();
        let target = g.input(img.clone().into_dyn());
        let (prefix, pass, recon) = if k == 0 {
            let pass = encode_pass(&g, &b, model, "bl", target, h, w);
            let recon = g.clamp01(pass.recon_raw);
            ("bl", pass, recon)
        } else {
            let pred = predict_layer(&g, &b, model, recon_vars[k - 1], h, w);
            let residual = g.sub(target, pred);
            let pass = encode_pass(&g, &b, model, "rc", residual, h, w);
            let recon = g.clamp01(g.add(pred, pass.recon_raw));
            ("rc", pass, recon)
        };
        let _ = prefix;
        stats.push(LayerStats {
            height: h,
            width: w,
            estimated_y_bits: pass.est_y_bits,
            estimated_z_bits: pass.est_z_bits,
            actual_y_bits: (pass.substream.y.len() * 8) as u64,
            actual_z_bits: (pass.substream.z.len() * 8) as u64,
            substream_bits: (pass.substream.byte_len() * 8) as u64,
        });
        substreams.push(pass.substream);
        recon_vars.push(recon);
        recons.push(to_image(&g.value(recon)));
    }
    let stream = container::pack(quality_index, &dims, &substreams)?;
    Ok(EncodeOutput {
        stream,
        recons,
        stats,
    })
}

/// Decodes a layered stream.
///
/// `max_layer` limits reconstruction to layers `0..=max_layer`; `None`
/// decodes every layer present.
pub fn decode(model: &CompassModel, stream: &[u8], max_layer: Option<usize>) -> Result<DecodeOutput> {
    let (header, substreams) = container::unpack(stream)?;
    let last = match max_layer {
        Some(k) if k >= header.layer_count() => {
            return Err(Error::LayerOutOfRange {
                requested: k,
                max: header.layer_count() - 1,
            })
        }
        Some(k) => k,
        None => header.layer_count() - 1,
    };
    let g = Graph::inference();
    let b = model.params.bind(&g);
    let mut recon_vars: Vec<Var> = Vec::with_capacity(last + 1);
    let mut recons = Vec::with_capacity(last + 1);
    for (k, sub) in substreams.iter().enumerate().take(last + 1) {
        let (h, w) = (usize::from(header.dims[k].0), usize::from(header.dims[k].1));
        let recon = if k == 0 {
            let raw = decode_pass(&g, &b, model, "bl", sub, h, w);
            g.clamp01(raw)
        } else {
            let pred = predict_layer(&g, &b, model, recon_vars[k - 1], h, w);
            let raw = decode_pass(&g, &b, model, "rc", sub, h, w);
            g.clamp01(g.add(pred, raw))
        };
        recon_vars.push(recon);
        recons.push(to_image(&g.value(recon)));
    }
    Ok(DecodeOutput { header, recons })
}
