use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{FlowConfig, FlowModel};
use crate::checkpoint::{self, TensorFile};
use crate::error::{Error, Result};
use crate::numerics::{Module, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowManifest {
    pub kind: String,
    pub config: FlowConfig,
    pub config_hash: String,
    /// Layer names in application order, `<scale>.<step>.<layer>`.
    pub topology: Vec<String>,
    pub initialized: bool,
    pub tensors: Vec<TensorFile>,
}

impl FlowModel {
    /// Writes `manifest.json` and one `<scale>.<step>.<layer>.<param>.ten`
    /// per tensor. The channel permutation and signs of each mix are stored
    /// alongside the trainable parameters.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<FlowManifest> {
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for (s, block) in self.scales.iter().enumerate() {
            for (k, step) in block.steps.iter().enumerate() {
                let perm = step.mix.perm.iter().map(|&p| p as f64).collect();
                owned.push((format!("{s}.{k}.inv1x1.perm"), Tensor::vector(perm)));
                owned.push((format!("{s}.{k}.inv1x1.sign"), Tensor::vector(step.mix.sign.clone())));
            }
        }
        let mut tensors: Vec<(String, &Tensor)> =
            self.params().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
        tensors.extend(owned.iter().map(|(n, t)| (n.clone(), t)));
        let files = checkpoint::write_tensors(dir, &tensors)?;
        let topology = (0..self.scales.len())
            .flat_map(|s| {
                (0..self.scales[s].steps.len()).flat_map(move |k| {
                    ["actnorm", "inv1x1", "coupling"].map(|l| format!("{s}.{k}.{l}"))
                })
            })
            .collect();
        let manifest = FlowManifest {
            kind: "flow".into(),
            config: self.config.clone(),
            config_hash: config_hash.into(),
            topology,
            initialized: self.is_initialized(),
            tensors: files,
        };
        checkpoint::write_manifest(dir, &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, FlowManifest)> {
        let manifest: FlowManifest = checkpoint::read_manifest(dir)?;
        if manifest.kind != "flow" {
            return Err(Error::corrupt(dir, format!("not a flow checkpoint: {}", manifest.kind)));
        }
        let mut model = FlowModel::identity(manifest.config.clone())
            .map_err(|e| Error::corrupt(dir, e.to_string()))?;
        let mut map = checkpoint::read_tensors(dir, &manifest.tensors)?;
        for p in model.params_mut() {
            checkpoint::assign(&mut map, &p.name.clone(), &mut p.value, dir)?;
        }
        for (s, block) in model.scales.iter_mut().enumerate() {
            for (k, step) in block.steps.iter_mut().enumerate() {
                let n = step.mix.sign.len();
                let mut perm = Tensor::zeros(&[n]);
                checkpoint::assign(&mut map, &format!("{s}.{k}.inv1x1.perm"), &mut perm, dir)?;
                let mut sign = Tensor::zeros(&[n]);
                checkpoint::assign(&mut map, &format!("{s}.{k}.inv1x1.sign"), &mut sign, dir)?;
                step.mix.perm = perm.data().iter().map(|&v| v as usize).collect();
                let mut seen = vec![false; n];
                if step.mix.perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
                    return Err(Error::corrupt(dir, format!("{s}.{k}.inv1x1.perm is not a permutation")));
                }
                step.mix.sign = sign.into_data();
                step.actnorm.initialized = manifest.initialized;
            }
        }
        Ok((model, manifest))
    }
}
