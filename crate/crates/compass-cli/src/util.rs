//! Shared command plumbing: error-to-exit-code mapping, atomic file output,
//! flag parsing helpers, and the model registry.

use std::path::{Path, PathBuf};

use compass_core::checkpoint;
use compass_core::model::{CompassModel, ModelConfig};

/// Errors split by exit code: usage problems exit 1, data/model problems
/// exit 2.
#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Data(String),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Usage(m) | AppError::Data(m) => f.write_str(m),
        }
    }
}

impl From<compass_core::Error> for AppError {
    fn from(e: compass_core::Error) -> Self {
        AppError::Data(e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;

pub fn usage(msg: impl Into<String>) -> AppError {
    AppError::Usage(msg.into())
}

pub fn data(msg: impl Into<String>) -> AppError {
    AppError::Data(msg.into())
}

/// Write `bytes` to `path` through a same-directory temp file and an atomic
/// rename, so failures never leave a partial output.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> AppResult<()> {
    let tmp = temp_sibling(path, "");
    std::fs::write(&tmp, bytes)
        .map_err(|e| data(format!("cannot write {}: {e}", path.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        data(format!("cannot finalize {}: {e}", path.display()))
    })
}

/// Atomically produce a file via a callback that writes to a temp path. The
/// temp path keeps `suffix` (e.g. ".png") so format-by-extension writers
/// work.
pub fn atomic_via<F>(path: &Path, suffix: &str, write: F) -> AppResult<()>
where
    F: FnOnce(&Path) -> AppResult<()>,
{
    let tmp = temp_sibling(path, suffix);
    write(&tmp).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        e
    })?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        data(format!("cannot finalize {}: {e}", path.display()))
    })
}

fn temp_sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp_name = format!(".{name}.tmp{}{suffix}", std::process::id());
    match dir {
        Some(d) => d.join(tmp_name),
        None => PathBuf::from(tmp_name),
    }
}

/// Parse "1.5,2.0" into scale factors. Structural problems are usage errors.
pub fn parse_scales(text: Option<&str>) -> AppResult<Vec<f64>> {
    let Some(text) = text else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for part in text.split(',') {
        let s: f64 = part
            .trim()
            .parse()
            .map_err(|_| usage(format!("invalid scale factor {part:?} in --scales")))?;
        if !(s > 1.0) || !s.is_finite() {
            return Err(usage(format!(
                "scale factors must be finite and > 1, got {s}"
            )));
        }
        if let Some(&prev) = out.last() {
            if s <= prev {
                return Err(usage("--scales must be strictly increasing"));
            }
        }
        out.push(s);
    }
    if out.is_empty() {
        return Err(usage("--scales must list at least one factor"));
    }
    Ok(out)
}

/// Parse "0,1,2" into indices.
pub fn parse_indices(text: &str) -> AppResult<Vec<usize>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("invalid index {p:?}")))
        })
        .collect()
}

/// Optional architecture overrides shared by several commands.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct ModelOverrides {
    /// Inter-layer prediction operator: liff | bicubic
    #[arg(long, value_name = "KIND")]
    pub predictor: Option<String>,
    /// Transform padding scheme: layerwise | lump
    #[arg(long, value_name = "MODE")]
    pub padding: Option<String>,
    /// Latents in the training distortion path: rounded | noisy
    #[arg(long, value_name = "MODE")]
    pub latent: Option<String>,
}

impl ModelOverrides {
    pub fn apply(&self, cfg: &mut ModelConfig) -> AppResult<()> {
        if let Some(p) = &self.predictor {
            cfg.predictor = p.parse().map_err(|e| usage(format!("{e}")))?;
        }
        if let Some(p) = &self.padding {
            cfg.padding = p.parse().map_err(|e| usage(format!("{e}")))?;
        }
        if let Some(l) = &self.latent {
            cfg.latent_mode = l.parse().map_err(|e| usage(format!("{e}")))?;
        }
        Ok(())
    }
}

/// Checkpoint path for rate point `idx` under `$COMPASS_MODEL_DIR`.
pub fn registry_path(idx: usize) -> AppResult<PathBuf> {
    let root = std::env::var_os("COMPASS_MODEL_DIR").ok_or_else(|| {
        usage("no --model given and COMPASS_MODEL_DIR is not set; pass a checkpoint path or export the registry directory")
    })?;
    Ok(PathBuf::from(root).join(format!("q{idx}.ckpt")))
}

/// Load a model from an explicit path, or from the registry slot `quality`,
/// applying any architecture overrides.
pub fn load_model(
    path: Option<&Path>,
    quality: usize,
    overrides: &ModelOverrides,
) -> AppResult<CompassModel> {
    let path = match path {
        Some(p) => p.to_path_buf(),
        None => registry_path(quality)?,
    };
    let ck = checkpoint::load(&path)
        .map_err(|e| data(format!("cannot load model {}: {e}", path.display())))?;
    let mut model = ck.into_model()?;
    overrides.apply(&mut model.config)?;
    Ok(model)
}
