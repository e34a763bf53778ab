//! Named parameter store shared by training, checkpointing, and inference.
//!
//! Parameters are flat `f64` arrays keyed by dotted names (`bl.enc.0.w`,
//! `liff.mlp.2.b`, ...). Freezing a subnetwork flips its `trainable` flag;
//! frozen entries bind to the tape as plain inputs so no gradient is ever
//! produced for them.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Var};
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct Entry {
    value: ArrayD<f64>,
    trainable: bool,
}

/// Ordered name → array map. Iteration order (lexicographic) is the canonical
/// order used by the optimizer and the checkpoint format.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: BTreeMap<String, Entry>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    /// Insert a trainable parameter; replaces any existing entry.
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.entries.insert(name.into(), Entry { value, trainable: true });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Overwrite the stored array (shape must match an existing entry).
    pub fn set(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` shape mismatch: stored {:?}, new {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Mark every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, entry) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                entry.trainable = trainable;
            }
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Names of currently trainable parameters, in canonical order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Register every parameter on a tape: trainable entries as gradient
    /// leaves, frozen ones as constants.
    pub fn bind(&self, g: &Graph) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, entry) in &self.entries {
            let v = if entry.trainable {
                g.param(entry.value.clone())
            } else {
                g.input(entry.value.clone())
            };
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }
}

/// Tape handles for one binding of a [`Params`] store.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handle for `name`; absence is a programming error, so this panics.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not registered"))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

// ---- initializers ----------------------------------------------------------

/// Gaussian array with the given standard deviation.
pub fn randn(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

/// He/Kaiming-style init for a conv kernel `(out, kh, kw, in)`.
pub fn he_conv(rng: &mut ChaCha20Rng, out: usize, kh: usize, kw: usize, inc: usize) -> ArrayD<f64> {
    let std = (2.0 / (kh * kw * inc) as f64).sqrt();
    randn(rng, &[out, kh, kw, inc], std)
}

/// He-style init for a transposed-conv kernel stored as the mirrored conv's
/// kernel `(in, kh, kw, out)`; fan-in counts the deconv's input channels.
pub fn he_deconv(
    rng: &mut ChaCha20Rng,
    inc: usize,
    kh: usize,
    kw: usize,
    out: usize,
) -> ArrayD<f64> {
    let std = (2.0 / (kh * kw * inc) as f64).sqrt();
    randn(rng, &[inc, kh, kw, out], std)
}

/// He-style init for a dense weight stored `(in, out)` (inputs hit rows).
pub fn he_linear(rng: &mut ChaCha20Rng, inc: usize, out: usize) -> ArrayD<f64> {
    let std = (2.0 / inc as f64).sqrt();
    randn(rng, &[inc, out], std)
}

/// Variance-preserving init (gain 1) for a conv kernel whose output is NOT
/// passed through a ReLU; He's factor 2 would double the variance at every
/// such layer and compound through a deep linear path.
pub fn lecun_conv(rng: &mut ChaCha20Rng, out: usize, kh: usize, kw: usize, inc: usize) -> ArrayD<f64> {
    let std = (1.0 / (kh * kw * inc) as f64).sqrt();
    randn(rng, &[out, kh, kw, inc], std)
}

/// Variance-preserving init (gain 1) for a linear layer with no ReLU after it.
pub fn lecun_linear(rng: &mut ChaCha20Rng, inc: usize, out: usize) -> ArrayD<f64> {
    let std = (1.0 / inc as f64).sqrt();
    randn(rng, &[inc, out], std)
}

/// Init for a linear layer whose `out` values are used as coefficients of a
/// `contraction`-wide dot product downstream: the extra `1/contraction`
/// variance factor keeps that product at unit scale too.
pub fn contraction_linear(
    rng: &mut ChaCha20Rng,
    inc: usize,
    out: usize,
    contraction: usize,
) -> ArrayD<f64> {
    let std = (1.0 / (inc * contraction) as f64).sqrt();
    randn(rng, &[inc, out], std)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

pub fn full(shape: &[usize], v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(ndarray::IxDyn(shape), v)
}

/// Uniform array over `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha20Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}
