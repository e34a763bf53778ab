//! Model configuration and parameter initialization.
//!
//! A [`CompassModel`] owns three parameter groups under dotted name prefixes:
//!
//! - `bl.*` — the base-layer image codec (analysis/synthesis + hyperprior),
//! - `rc.*` — the residual codec shared by every enhancement layer,
//! - `liff.*` — the implicit inter-layer predictor shared by every
//!   enhancement layer.
//!
//! Exactly one predictor and one residual codec exist regardless of how many
//! enhancement layers a stream carries.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::params::{self, Params};
use crate::tensor::ops::softplus_inv;
use crate::{Error, Result};

/// Which inter-layer predictor the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// Implicit filter predictor (feature extractor + filter MLP).
    Liff,
    /// Plain bicubic upscaling of the previous reconstruction.
    Bicubic,
}

/// How odd spatial dims are made divisible by the transform stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    /// Replicate-pad one row/column at each stride-2 stage that sees an odd
    /// extent; the mirrored decoder crops stage by stage.
    Layerwise,
    /// Replicate-pad the input once to a multiple of the total stride and
    /// crop only the final output.
    Lump,
}

/// Which latent feeds the synthesis transform during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Distortion path sees rounded latents with straight-through gradients.
    Rounded,
    /// Distortion path sees the same noisy latents as the rate path.
    Noisy,
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "liff" => Ok(PredictorKind::Liff),
            "bicubic" => Ok(PredictorKind::Bicubic),
            other => Err(Error::invalid(format!("unknown predictor `{other}`"))),
        }
    }
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layerwise" => Ok(PaddingMode::Layerwise),
            "lump" => Ok(PaddingMode::Lump),
            other => Err(Error::invalid(format!("unknown padding mode `{other}`"))),
        }
    }
}

impl std::str::FromStr for LatentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rounded" => Ok(LatentMode::Rounded),
            "noisy" => Ok(LatentMode::Noisy),
            other => Err(Error::invalid(format!("unknown latent mode `{other}`"))),
        }
    }
}

/// Shape of the implicit predictor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiffConfig {
    /// Base feature channels produced by the extractor.
    pub feat_channels: usize,
    /// Number of residual dense blocks.
    pub rdb_count: usize,
    /// Dense conv layers inside each block.
    pub rdb_convs: usize,
    /// Channels added by each dense conv.
    pub growth: usize,
    /// Width of each hidden MLP layer.
    pub mlp_hidden: usize,
    /// Number of hidden MLP layers (weight matrices = hidden + 1).
    pub mlp_layers: usize,
}

impl Default for LiffConfig {
    fn default() -> Self {
        LiffConfig {
            feat_channels: 64,
            rdb_count: 4,
            rdb_convs: 4,
            growth: 32,
            mlp_hidden: 256,
            mlp_layers: 5,
        }
    }
}

impl LiffConfig {
    /// Channels after 3x3 feature unfolding.
    pub fn unfolded_channels(&self) -> usize {
        9 * self.feat_channels
    }

    /// MLP input width: unfolded features plus local offset (2) and scale
    /// token (2).
    pub fn mlp_in(&self) -> usize {
        self.unfolded_channels() + 4
    }

    /// MLP output width: one 3-vector of filter taps per unfolded channel.
    pub fn mlp_out(&self) -> usize {
        self.unfolded_channels() * 3
    }
}

/// Shape of the full layered codec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels of the image/residual latent `y`.
    pub latent_channels: usize,
    /// Channels of the hyper latent `z`.
    pub hyper_channels: usize,
    /// Stride-2 stages in the main analysis transform (total stride `2^stages`).
    pub stages: usize,
    /// Stride-2 stages in the hyper analysis transform.
    pub hyper_stages: usize,
    pub liff: LiffConfig,
    pub predictor: PredictorKind,
    pub padding: PaddingMode,
    pub latent_mode: LatentMode,
    /// Symbol range half-width for entropy coding; values outside
    /// `[-range, range]` relative to the predicted mean use escape coding.
    pub symbol_range: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_channels: 128,
            hyper_channels: 192,
            stages: 4,
            hyper_stages: 2,
            liff: LiffConfig::default(),
            predictor: PredictorKind::Liff,
            padding: PaddingMode::Layerwise,
            latent_mode: LatentMode::Rounded,
            symbol_range: 64,
        }
    }
}

impl ModelConfig {
    /// Mid-sized configuration: trains in minutes on one core while leaving
    /// enough capacity for meaningful rate–distortion behavior.
    pub fn small() -> Self {
        ModelConfig {
            latent_channels: 16,
            hyper_channels: 16,
            stages: 2,
            hyper_stages: 2,
            liff: LiffConfig {
                feat_channels: 8,
                rdb_count: 1,
                rdb_convs: 2,
                growth: 8,
                mlp_hidden: 32,
                mlp_layers: 1,
            },
            ..ModelConfig::default()
        }
    }

    /// Small configuration for fast tests: same structure, few channels.
    pub fn tiny() -> Self {
        ModelConfig {
            latent_channels: 8,
            hyper_channels: 8,
            stages: 2,
            hyper_stages: 2,
            liff: LiffConfig {
                feat_channels: 4,
                rdb_count: 1,
                rdb_convs: 2,
                growth: 4,
                mlp_hidden: 16,
                mlp_layers: 1,
            },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0
            || self.hyper_channels == 0
            || self.stages == 0
            || self.hyper_stages == 0
        {
            return Err(Error::invalid("channel/stage counts must be positive"));
        }
        if self.liff.feat_channels == 0 || self.liff.mlp_hidden == 0 {
            return Err(Error::invalid("predictor widths must be positive"));
        }
        if self.symbol_range == 0 || self.symbol_range > 1 << 14 {
            return Err(Error::invalid("symbol range must be in 1..=16384"));
        }
        Ok(())
    }
}

/// Scale floor added to the squared scale head output.
pub const SIGMA_MIN: f64 = 1e-6;

/// The full model: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct CompassModel {
    pub config: ModelConfig,
    pub params: Params,
}

/// Register one codec's parameters (analysis, synthesis, hyper path, and the
/// factorized hyper-latent prior) under `prefix`.
fn init_codec(p: &mut Params, rng: &mut ChaCha20Rng, prefix: &str, cfg: &ModelConfig) {
    let n = cfg.latent_channels;
    let m = cfg.hyper_channels;
    // analysis: stride-2 conv stack, normalization between stages
    for s in 0..cfg.stages {
        let inc = if s == 0 { 3 } else { n };
        p.insert(format!("{prefix}.ga.{s}.w"), params::he_conv(rng, n, 5, 5, inc));
        p.insert(format!("{prefix}.ga.{s}.b"), params::zeros(&[n]));
        if s + 1 < cfg.stages {
            init_gdn(p, &format!("{prefix}.ga.gdn{s}"), n);
        }
    }
    // synthesis: mirrored deconv stack
    for s in 0..cfg.stages {
        let out = if s + 1 == cfg.stages { 3 } else { n };
        p.insert(format!("{prefix}.gs.{s}.w"), params::he_deconv(rng, n, 5, 5, out));
        p.insert(format!("{prefix}.gs.{s}.b"), params::zeros(&[out]));
        if s + 1 < cfg.stages {
            init_gdn(p, &format!("{prefix}.gs.igdn{s}"), n);
        }
    }
    // hyper analysis: one stride-1 then stride-2 stages
    p.insert(format!("{prefix}.ha.0.w"), params::he_conv(rng, m, 3, 3, n));
    p.insert(format!("{prefix}.ha.0.b"), params::zeros(&[m]));
    for s in 0..cfg.hyper_stages {
        p.insert(format!("{prefix}.ha.{}.w", s + 1), params::he_conv(rng, m, 5, 5, m));
        p.insert(format!("{prefix}.ha.{}.b", s + 1), params::zeros(&[m]));
    }
    // hyper synthesis: mirrored, ends in a stride-1 head producing mean and
    // raw scale stacked on the channel axis
    for s in 0..cfg.hyper_stages {
        p.insert(format!("{prefix}.hs.{s}.w"), params::he_deconv(rng, m, 5, 5, m));
        p.insert(format!("{prefix}.hs.{s}.b"), params::zeros(&[m]));
    }
    let head = cfg.hyper_stages;
    p.insert(format!("{prefix}.hs.{head}.w"), params::he_conv(rng, 2 * n, 3, 3, m));
    // scale half of the head bias starts at 1 so a fresh model emits
    // sigma ≈ 1 (squared map) instead of collapsing to the floor
    let mut head_b = params::zeros(&[2 * n]);
    for c in n..2 * n {
        head_b[[c]] = 1.0;
    }
    p.insert(format!("{prefix}.hs.{head}.b"), head_b);
    // factorized prior over the hyper latent: per-channel monotone CDF built
    // from three nonneg-matrix layers with gated-tanh couplings; each layer's
    // weight is 1/(fan_in * 10^(1/3)) so the initial CDF is approximately a
    // logistic with scale 10
    let f = 10f64.powf(1.0 / 3.0);
    p.insert(format!("{prefix}.zp.h1"), params::full(&[m, 1, 3], softplus_inv(1.0 / f)));
    p.insert(format!("{prefix}.zp.b1"), params::uniform(rng, &[m, 3], -0.5, 0.5));
    p.insert(format!("{prefix}.zp.a1"), params::zeros(&[m, 3]));
    p.insert(format!("{prefix}.zp.h2"), params::full(&[m, 3, 3], softplus_inv(1.0 / (3.0 * f))));
    p.insert(format!("{prefix}.zp.b2"), params::uniform(rng, &[m, 3], -0.5, 0.5));
    p.insert(format!("{prefix}.zp.a2"), params::zeros(&[m, 3]));
    p.insert(format!("{prefix}.zp.h3"), params::full(&[m, 3, 1], softplus_inv(1.0 / (3.0 * f))));
    p.insert(format!("{prefix}.zp.b3"), params::zeros(&[m, 1]));
}

/// Normalization parameters: raw values pass through softplus at use sites.
fn init_gdn(p: &mut Params, prefix: &str, c: usize) {
    p.insert(format!("{prefix}.beta_raw"), params::full(&[c], softplus_inv(1.0)));
    let mut gamma = params::full(&[c, c], softplus_inv(1e-6));
    let diag = softplus_inv(0.1);
    for i in 0..c {
        gamma[[i, i]] = diag;
    }
    p.insert(format!("{prefix}.gamma_raw"), gamma);
}

/// Register the implicit predictor's parameters under `liff.`.
///
/// The feature path here has no normalization, so initialization must be
/// variance-preserving end to end: layers feeding a ReLU get He's factor 2,
/// purely linear layers get gain 1, and the filter head gets an extra
/// `1/unfolded_channels` variance factor because its outputs are contracted
/// against the unfolded features to form the prediction.
fn init_liff(p: &mut Params, rng: &mut ChaCha20Rng, cfg: &LiffConfig) {
    let g0 = cfg.feat_channels;
    p.insert("liff.sfe1.w", params::lecun_conv(rng, g0, 3, 3, 3));
    p.insert("liff.sfe1.b", params::zeros(&[g0]));
    p.insert("liff.sfe2.w", params::lecun_conv(rng, g0, 3, 3, g0));
    p.insert("liff.sfe2.b", params::zeros(&[g0]));
    for d in 0..cfg.rdb_count {
        for c in 0..cfg.rdb_convs {
            let inc = g0 + c * cfg.growth;
            p.insert(format!("liff.rdb{d}.conv{c}.w"), params::he_conv(rng, cfg.growth, 3, 3, inc));
            p.insert(format!("liff.rdb{d}.conv{c}.b"), params::zeros(&[cfg.growth]));
        }
        let fuse_in = g0 + cfg.rdb_convs * cfg.growth;
        p.insert(format!("liff.rdb{d}.lff.w"), params::lecun_conv(rng, g0, 1, 1, fuse_in));
        p.insert(format!("liff.rdb{d}.lff.b"), params::zeros(&[g0]));
    }
    p.insert("liff.gff1.w", params::lecun_conv(rng, g0, 1, 1, cfg.rdb_count * g0));
    p.insert("liff.gff1.b", params::zeros(&[g0]));
    p.insert("liff.gff2.w", params::lecun_conv(rng, g0, 3, 3, g0));
    p.insert("liff.gff2.b", params::zeros(&[g0]));
    let mut widths = Vec::with_capacity(cfg.mlp_layers + 2);
    widths.push(cfg.mlp_in());
    widths.extend(std::iter::repeat(cfg.mlp_hidden).take(cfg.mlp_layers));
    widths.push(cfg.mlp_out());
    for i in 0..widths.len() - 1 {
        let (inc, out) = (widths[i], widths[i + 1]);
        let w = if i < widths.len() - 2 {
            params::he_linear(rng, inc, out)
        } else {
            params::contraction_linear(rng, inc, out, cfg.unfolded_channels())
        };
        p.insert(format!("liff.mlp.{i}.w"), w);
        p.insert(format!("liff.mlp.{i}.b"), params::zeros(&[widths[i + 1]]));
    }
}

impl CompassModel {
    /// Fresh model with seeded, architecture-scaled random initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut p = Params::new();
        init_codec(&mut p, &mut rng, "bl", &config);
        init_codec(&mut p, &mut rng, "rc", &config);
        // The predictor group exists even for the bicubic variant: the two
        // predictor choices then share identical initial codec weights under
        // one seed, and switching the predictor flag on an existing model
        // never invalidates its checkpoints.
        init_liff(&mut p, &mut rng, &config.liff);
        Ok(CompassModel { config, params: p })
    }

    /// Freeze or unfreeze a parameter group (`bl.`, `rc.`, `liff.`).
    pub fn set_group_trainable(&mut self, prefix: &str, trainable: bool) {
        self.params.set_trainable_prefix(prefix, trainable);
    }
}
