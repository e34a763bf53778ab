//! Model checkpoint files.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "CMCK"
//! version      u8       currently 1
//! meta_len     u32      length of the JSON metadata blob
//! meta         meta_len bytes: {"model": <model config>, "train": <opaque>}
//! seed         u64      RNG seed the run was started with
//! step         u64      number of optimizer steps taken
//! param_count  u32
//! per param (sorted by name):
//!   name_len   u16      UTF-8 name bytes follow
//!   trainable  u8       0 or 1
//!   ndim       u8       dimension count, then ndim x u32 dims
//!   data       product(dims) x f32
//! ```
//!
//! Values are stored as 32-bit floats; loading widens them back to f64, so
//! loading the same file twice always yields bit-identical parameters.
//! Saving goes through a temporary file in the target directory followed by
//! a rename, so a crash never leaves a half-written checkpoint at the final
//! path.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CompassModel, ModelConfig};
use crate::params::Params;

pub const MAGIC: [u8; 4] = *b"CMCK";
pub const FORMAT_VERSION: u8 = 1;

/// JSON metadata stored alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Training settings snapshot; opaque here so loading weights never
    /// depends on trainer types. `None` for checkpoints saved outside
    /// training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<serde_json::Value>,
}

/// A fully parsed checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub seed: u64,
    pub step: u64,
    pub params: Params,
}

impl Checkpoint {
    /// Validates the parameter set against the stored config and returns the
    /// model. Every parameter the config calls for must be present with the
    /// right shape, with nothing extra.
    pub fn into_model(self) -> Result<CompassModel> {
        self.meta.model.validate()?;
        let reference = CompassModel::init(self.meta.model.clone(), 0)?;
        if reference.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this config, file has {}",
                reference.params.len(),
                self.params.len()
            )));
        }
        for (name, value) in reference.params.iter() {
            let stored = self
                .params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if stored.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config requires {:?}",
                    stored.shape(),
                    value.shape()
                )));
            }
        }
        Ok(CompassModel {
            config: self.meta.model,
            params: self.params,
        })
    }
}

/// Serializes a model (plus training progress) to `path` atomically.
pub fn save(
    path: &Path,
    model: &CompassModel,
    train: Option<serde_json::Value>,
    seed: u64,
    step: u64,
) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        train,
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| Error::Checkpoint(format!("metadata serialization failed: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.push(FORMAT_VERSION);
    let meta_len = u32::try_from(meta_json.len())
        .map_err(|_| Error::Checkpoint("metadata too large".into()))?;
    buf.extend_from_slice(&meta_len.to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    let count = u32::try_from(model.params.len())
        .map_err(|_| Error::Checkpoint("too many parameters".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, value) in model.params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(u8::from(model.params.is_trainable(name)));
        let ndim = u8::try_from(value.ndim())
            .map_err(|_| Error::Checkpoint(format!("parameter {name} has too many dims")))?;
        buf.push(ndim);
        for &d in value.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("parameter {name} dim too large")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in value.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp_name = format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    );
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => Path::new(&tmp_name).to_path_buf(),
    };
    std::fs::write(&tmp, bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Reads a checkpoint file.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let seed = r.u64()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = Params::new();
    for _ in 0..count {
        let name_len = usize::from(r.u16()?);
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let trainable = r.u8()? != 0;
        let ndim = usize::from(r.u8()?);
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let data = r.take(len * 4)?;
        let mut values = Vec::with_capacity(len);
        for chunk in data.chunks_exact(4) {
            values.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        params.insert(name.clone(), arr);
        if !trainable {
            params.set_trainable_prefix(&name, false);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(Checkpoint {
        meta,
        seed,
        step,
        params,
    })
}
