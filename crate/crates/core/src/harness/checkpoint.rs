//! Checkpoints: one EGT1 file per named tensor plus a `manifest.toml`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::model::Model;
use crate::numerics::Tensor;
use crate::params::Params;

pub const MANIFEST: &str = "manifest.toml";
pub const FORMAT: &str = "ego3rt-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: usize,
    /// Hash of the parts of the configuration that shape the model.
    pub model_hash: String,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub tensor: Vec<TensorEntry>,
    pub config: RunConfig,
}

/// Writes the model into `dir` and returns the manifest path.
pub fn save_checkpoint(model: &Model, cfg: &RunConfig, step: usize, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut tensor = Vec::new();
    for (name, t) in model.named() {
        let file = format!("{name}.egt");
        t.save(dir.join(&file))?;
        tensor.push(TensorEntry { name, shape: t.shape().to_vec(), file });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        step,
        model_hash: cfg.model_hash()?,
        config_hash: cfg.hash()?,
        created: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        tensor,
        config: cfg.clone(),
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?)?;
    Ok(path)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = manifest_path(path.as_ref());
    let m: Manifest =
        toml::from_str(&std::fs::read_to_string(&path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT {
        return Err(Error::Version(format!("checkpoint format {:?}, expected {FORMAT:?}", m.format)));
    }
    Ok(m)
}

/// Loads a checkpoint from its directory or manifest. With `expect`, the
/// model-shaping configuration must match.
pub fn load_checkpoint(path: impl AsRef<Path>, expect: Option<&RunConfig>) -> Result<(Model, Manifest)> {
    let path = manifest_path(path.as_ref());
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = read_manifest(&path)?;
    let cfg = expect.unwrap_or(&m.config);
    if cfg.model_hash()? != m.model_hash || m.config.model_hash()? != m.model_hash {
        return Err(Error::Version("checkpoint was written for a different model configuration".into()));
    }
    let mut model = Model::new(cfg)?;
    let mut named = model.named_mut();
    if named.len() != m.tensor.len() {
        return Err(Error::Version(format!("checkpoint has {} tensors, model has {}", m.tensor.len(), named.len())));
    }
    for ((name, slot), e) in named.iter_mut().zip(&m.tensor) {
        if *name != e.name || slot.shape() != e.shape.as_slice() {
            return Err(Error::Version(format!("tensor {:?} {:?} does not match {name:?} {:?}", e.name, e.shape, slot.shape())));
        }
        let t = Tensor::load(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("{} has shape {:?}, manifest says {:?}", e.file, t.shape(), e.shape)));
        }
        **slot = t;
    }
    Ok((model, m))
}
