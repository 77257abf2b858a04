//! Checkpoint directories: a `manifest.json` plus one BTEN file per tensor,
//! each listed with its SHA-256 so corruption is detected on load.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::bten::Bten;
use crate::numerics::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorFile {
    pub name: String,
    pub file: String,
    pub sha256: String,
}

/// Writes each named tensor as `<name>.ten` (f64) under `dir`.
pub fn write_tensors(dir: &Path, tensors: &[(String, &Tensor)]) -> Result<Vec<TensorFile>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tensors
        .iter()
        .map(|(name, t)| {
            let file = format!("{name}.ten");
            let sha256 = Bten::f64(t).write(&dir.join(&file))?;
            Ok(TensorFile {
                name: name.clone(),
                file,
                sha256,
            })
        })
        .collect()
}

pub fn read_tensors(dir: &Path, files: &[TensorFile]) -> Result<HashMap<String, Tensor>> {
    files
        .iter()
        .map(|f| {
            let b = Bten::read_verified(&dir.join(&f.file), &f.sha256)?;
            Ok((f.name.clone(), b.to_tensor()?))
        })
        .collect()
}

pub fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest<T: DeserializeOwned>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))
}

/// Copies `source` into `target`, requiring matching shape.
pub(crate) fn assign(
    map: &mut HashMap<String, Tensor>,
    name: &str,
    target: &mut Tensor,
    dir: &Path,
) -> Result<()> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::corrupt(dir, format!("missing tensor {name}")))?;
    if t.shape() != target.shape() {
        return Err(Error::corrupt(
            dir,
            format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), target.shape()),
        ));
    }
    *target = t;
    Ok(())
}
