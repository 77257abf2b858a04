use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TensorFile};
use crate::error::{Error, Result};
use crate::losses::ProbMap;
use crate::numerics::{Graph, Module, Param, Tensor, Var};
use crate::scenegen::SceneDataset;

/// Anything that maps dataset sample `i` to a class distribution.
pub trait Segmenter: Sync {
    fn predict(&self, ds: &SceneDataset, i: usize) -> Result<ProbMap>;
}

/// Passes ground truth through as a one-hot prediction.
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn predict(&self, ds: &SceneDataset, i: usize) -> Result<ProbMap> {
        ProbMap::one_hot(&ds.label_map(i), crate::scenegen::NUM_CLASSES)
    }
}

/// Fully convolutional segmenter: 3×3 convs with tanh between, then a
/// per-pixel log-softmax.
#[derive(Clone, Debug)]
pub struct SegNet {
    pub widths: Vec<usize>,
    pub layers: Vec<(Param, Param)>,
}

pub const DEFAULT_WIDTHS: [usize; 5] = [3, 16, 32, 32, 6];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegManifest {
    pub kind: String,
    pub widths: Vec<usize>,
    pub config_hash: String,
    pub tensors: Vec<TensorFile>,
}

impl SegNet {
    /// Kernels drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) || *widths.last().unwrap() < 2 {
            return Err(Error::invalid(format!("invalid segmenter widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (cin, cout) = (w[0], w[1]);
                let std = (1.0 / (9 * cin) as f64).sqrt();
                let k = (0..9 * cin * cout)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (
                    Param::new(format!("seg.conv{i}.weight"), Tensor::new(vec![3, 3, cin, cout], k).unwrap()),
                    Param::new(format!("seg.conv{i}.bias"), Tensor::zeros(&[cout])),
                )
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Log-probabilities for `images` (`N×H×W×3` or `H×W×3`).
    pub fn forward_graph(&self, g: &mut Graph, images: Var, trainable: bool) -> Result<Var> {
        let mut h = images;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wv = g.bind(w, trainable);
            let bv = g.bind(b, trainable);
            h = g.conv2d(h, wv, bv)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        g.log_softmax_channels(h)
    }

    pub fn predict_image(&self, image: &Tensor) -> Result<ProbMap> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let lp = self.forward_graph(&mut g, x, false)?;
        let log_values = g.value(lp).clone();
        Ok(ProbMap {
            values: log_values.map(f64::exp),
            log_values,
        })
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<SegManifest> {
        let tensors: Vec<(String, &Tensor)> = self.params().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
        let files = checkpoint::write_tensors(dir, &tensors)?;
        let manifest = SegManifest {
            kind: "segnet".into(),
            widths: self.widths.clone(),
            config_hash: config_hash.into(),
            tensors: files,
        };
        checkpoint::write_manifest(dir, &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, SegManifest)> {
        let manifest: SegManifest = checkpoint::read_manifest(dir)?;
        if manifest.kind != "segnet" {
            return Err(Error::corrupt(dir, format!("not a segmenter checkpoint: {}", manifest.kind)));
        }
        let mut net = SegNet::new(&manifest.widths, 0).map_err(|e| Error::corrupt(dir, e.to_string()))?;
        let mut map = checkpoint::read_tensors(dir, &manifest.tensors)?;
        for p in net.params_mut() {
            checkpoint::assign(&mut map, &p.name.clone(), &mut p.value, dir)?;
        }
        Ok((net, manifest))
    }
}

impl Segmenter for SegNet {
    fn predict(&self, ds: &SceneDataset, i: usize) -> Result<ProbMap> {
        self.predict_image(&ds.image(i)?)
    }
}

impl Module for SegNet {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }
}
