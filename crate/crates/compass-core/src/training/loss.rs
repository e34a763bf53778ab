//! Rate–distortion loss tape for one sampled pyramid.
//!
//! For every layer that is being optimized, the rate term is estimated with
//! additive-uniform-noise latents (the differentiable surrogate for rounding)
//! while the distortion term reconstructs through the same latents the
//! decoder will see (rounded, with a straight-through gradient). Layers that
//! are frozen inputs to the stage — the base layer during enhancement
//! training — are reconstructed exactly as the decoder would, with rounding
//! and no noise, so the enhancement layers learn against the real signal.
//!
//! Noise draws happen in a fixed order per coded layer: first the main
//! latent, then the hyper latent. Together with the per-step RNG streams this
//! makes every loss evaluation reproducible.

use ndarray::Array3;
use rand_chacha::ChaCha20Rng;

use crate::codec::{analysis, dim_plan, hyper_analysis, hyper_synthesis, synthesis, z_prior_bits};
use crate::error::{Error, Result};
use crate::liff;
use crate::model::{LatentMode, ModelConfig, PredictorKind};
use crate::params::Bound;
use crate::tensor::{Graph, Var};

use super::{TrainStage, DISTORTION_SCALE};

/// Per-layer terms of one loss evaluation, read off the tape at build time.
#[derive(Debug, Clone)]
pub struct LayerTerms {
    /// Pyramid layer index the terms refer to.
    pub layer: usize,
    /// Estimated rate in bits per pixel of this layer (0 for stages without
    /// rate terms).
    pub rate_bpp: f64,
    /// Scaled distortion: `255^2 *` mean squared error against the target.
    pub distortion: f64,
}

/// A built loss tape plus its scalar readings.
pub struct LossBreakdown {
    /// Scalar loss node; pass to [`Graph::backward`].
    pub total: Var,
    /// Value of `total`.
    pub loss: f64,
    /// Per-layer terms in pyramid order.
    pub layers: Vec<LayerTerms>,
}

/// Outputs of one coded pass with noisy rate estimation.
struct CodedTerms {
    /// Synthesis output from the reconstruction latent, not yet clamped.
    recon_raw: Var,
    /// Estimated total bits (main + hyper latent).
    rate_bits: Var,
}

/// Analysis → (noisy rate estimate, reconstruction) for one codec under
/// `prefix`. Draws main-latent noise, then hyper-latent noise.
fn coded_layer(
    g: &Graph,
    b: &Bound,
    prefix: &str,
    cfg: &ModelConfig,
    x: Var,
    h: usize,
    w: usize,
    rng: &mut ChaCha20Rng,
) -> CodedTerms {
    let plan = dim_plan(cfg, h, w);
    let y = analysis(g, b, prefix, cfg, &plan, x);
    let y_noisy = g.add_noise(y, rng);
    let z = hyper_analysis(g, b, prefix, cfg, &plan, y);
    let z_noisy = g.add_noise(z, rng);
    let (mu, sigma) = hyper_synthesis(g, b, prefix, cfg, &plan, z_noisy);
    let y_bits = g.sum_all(g.gaussian_bits(y_noisy, mu, sigma));
    let z_bits = z_prior_bits(g, b, prefix, z_noisy);
    let rate_bits = g.add(y_bits, z_bits);
    let y_recon = match cfg.latent_mode {
        LatentMode::Rounded => g.round_ste(y),
        LatentMode::Noisy => y_noisy,
    };
    let recon_raw = synthesis(g, b, prefix, cfg, &plan, y_recon);
    CodedTerms {
        recon_raw,
        rate_bits,
    }
}

/// Decoder-consistent reconstruction (rounded latents, no noise, no rate) for
/// a frozen codec under `prefix`. Returns the unclamped synthesis output.
fn coded_layer_frozen(
    g: &Graph,
    b: &Bound,
    prefix: &str,
    cfg: &ModelConfig,
    x: Var,
    h: usize,
    w: usize,
) -> Var {
    let plan = dim_plan(cfg, h, w);
    let y = analysis(g, b, prefix, cfg, &plan, x);
    let y_hat = g.round_ste(y);
    synthesis(g, b, prefix, cfg, &plan, y_hat)
}

/// Predict layer dimensions `(h, w)` from the previous reconstruction.
fn predict_layer(
    g: &Graph,
    b: &Bound,
    cfg: &ModelConfig,
    source: Var,
    h: usize,
    w: usize,
) -> Var {
    match cfg.predictor {
        PredictorKind::Liff => liff::predict(g, b, &cfg.liff, source, h, w),
        PredictorKind::Bicubic => g.resize_bicubic(source, h, w),
    }
}

fn layer_dims(x: &Array3<f64>) -> Result<(usize, usize)> {
    let sh = x.shape();
    if sh[2] != 3 || sh[0] == 0 || sh[1] == 0 {
        return Err(Error::invalid(format!(
            "pyramid layers must be (H, W, 3) with positive dims, got {sh:?}"
        )));
    }
    Ok((sh[0], sh[1]))
}

/// Build the loss for `stage` over one pyramid (`pyramid[0]` smallest).
///
/// * `pretrain-bl` uses only `pyramid[0]`: `rate_bpp + lambda * distortion`.
/// * `pretrain-liff` sums scaled prediction error over all enhancement
///   layers; predictions chain through clamped previous predictions, and the
///   frozen base layer is reconstructed decoder-consistently.
/// * `pretrain-rc` and `joint` build the full chain: each enhancement layer
///   contributes `rate_bpp + lambda * distortion` of its clamped
///   reconstruction; which parameters actually move is decided by the
///   trainable flags, not by the tape.
pub fn combined_rd_loss(
    g: &Graph,
    b: &Bound,
    cfg: &ModelConfig,
    stage: TrainStage,
    lambda: f64,
    pyramid: &[Array3<f64>],
    rng: &mut ChaCha20Rng,
) -> Result<LossBreakdown> {
    if pyramid.is_empty() {
        return Err(Error::invalid("pyramid must have at least one layer"));
    }
    if stage != TrainStage::PretrainBl && pyramid.len() < 2 {
        return Err(Error::invalid(format!(
            "stage {} needs at least one enhancement layer",
            stage.as_str()
        )));
    }
    if stage == TrainStage::PretrainLiff && cfg.predictor != PredictorKind::Liff {
        return Err(Error::invalid(
            "pretrain-liff requires the learned predictor; the bicubic \
             predictor has no parameters to train",
        ));
    }

    let (h0, w0) = layer_dims(&pyramid[0])?;
    let x0 = g.input(pyramid[0].clone().into_dyn());

    if stage == TrainStage::PretrainBl {
        let ct = coded_layer(g, b, "bl", cfg, x0, h0, w0, rng);
        let rate_term = g.mul_scalar(ct.rate_bits, 1.0 / (h0 * w0) as f64);
        let recon = g.clamp01(ct.recon_raw);
        let dist = g.mul_scalar(g.mse(recon, x0), DISTORTION_SCALE);
        let total = g.add(rate_term, g.mul_scalar(dist, lambda));
        return Ok(LossBreakdown {
            total,
            loss: g.value(total)[[]],
            layers: vec![LayerTerms {
                layer: 0,
                rate_bpp: g.value(rate_term)[[]],
                distortion: g.value(dist)[[]],
            }],
        });
    }

    // Enhancement stages: frozen, decoder-consistent base reconstruction.
    let base_raw = coded_layer_frozen(g, b, "bl", cfg, x0, h0, w0);
    let mut source = g.clamp01(base_raw);
    let mut layers = Vec::with_capacity(pyramid.len() - 1);
    let mut total: Option<Var> = None;

    for (k, target_arr) in pyramid.iter().enumerate().skip(1) {
        let (h, w) = layer_dims(target_arr)?;
        let target = g.input(target_arr.clone().into_dyn());
        let pred = predict_layer(g, b, cfg, source, h, w);

        let (term, rate_term, dist) = match stage {
            TrainStage::PretrainLiff => {
                // Pure upsampler objective: unclamped prediction error.
                let dist = g.mul_scalar(g.mse(pred, target), DISTORTION_SCALE);
                source = g.clamp01(pred);
                (dist, None, dist)
            }
            TrainStage::PretrainRc | TrainStage::Joint => {
                let residual = g.sub(target, pred);
                let ct = coded_layer(g, b, "rc", cfg, residual, h, w, rng);
                let rate_term = g.mul_scalar(ct.rate_bits, 1.0 / (h * w) as f64);
                let recon = g.clamp01(g.add(pred, ct.recon_raw));
                let dist = g.mul_scalar(g.mse(recon, target), DISTORTION_SCALE);
                let term = g.add(rate_term, g.mul_scalar(dist, lambda));
                source = recon;
                (term, Some(rate_term), dist)
            }
            TrainStage::PretrainBl => unreachable!(),
        };

        layers.push(LayerTerms {
            layer: k,
            rate_bpp: rate_term.map_or(0.0, |r| g.value(r)[[]]),
            distortion: g.value(dist)[[]],
        });
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }

    let total = total.expect("at least one enhancement layer");
    Ok(LossBreakdown {
        total,
        loss: g.value(total)[[]],
        layers,
    })
}
