//! Spatially scalable learned image compression.
//!
//! One bitstream carries `K + 1` arbitrarily scaled versions of an image. The
//! smallest version (the base layer) is coded by a standalone learned codec; every
//! enhancement layer codes only the residual between the true image at that scale
//! and a prediction synthesized from the previous layer's reconstruction by a
//! scale-agnostic implicit filter network. A single predictor and a single
//! residual codec are shared by all enhancement layers, so the number of layers is
//! not baked into the model.
//!
//! Module map:
//! - [`tensor`]: f64 tensor kernels and the reverse-mode tape used for training.
//! - [`coords`]: normalized pixel-center coordinates, nearest correspondence,
//!   local offset grids, and scale tokens.
//! - [`liff`]: the implicit inter-layer predictor (feature extractor, feature
//!   unfolding, filter-generating MLP, per-pixel filtering).
//! - [`codec`]: the mean-scale hyperprior transform stack shared by the base and
//!   residual codecs, quantization, and the rate model.
//! - [`entropy`]: range coder, integer CDF tables, and the scalable container.
//! - [`pipeline`]: layered encode/decode orchestration.
//! - [`training`]: rate-distortion loss, optimizer, staged training, sampling.
//! - [`evalkit`]: PSNR, BD-rate, bicubic resampling, dataset evaluation.

pub mod checkpoint;
pub mod codec;
pub mod coords;
pub mod entropy;
pub mod error;
pub mod evalkit;
pub mod image_io;
pub mod liff;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
