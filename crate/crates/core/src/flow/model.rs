use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{squeeze, squeeze_tensor, unsqueeze_tensor, ActNorm, Coupling, Inv1x1};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Module, Param, Tensor, Var};

/// Topology and shape of a multi-scale flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_scales: usize,
    pub steps_per_scale: usize,
    pub hidden: usize,
    pub scale_cap: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 6,
            num_scales: 2,
            steps_per_scale: 4,
            hidden: 32,
            scale_cap: 2.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.num_scales;
        if self.num_scales == 0 || self.steps_per_scale == 0 || self.hidden == 0 {
            return Err(Error::invalid(
                "flow needs at least one scale, one step and one hidden unit",
            ));
        }
        if self.channels == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::invalid(format!(
                "flow input {}x{}x{} not divisible by 2^{}",
                self.height, self.width, self.channels, self.num_scales
            )));
        }
        if !(self.scale_cap > 0.0) {
            return Err(Error::invalid("scale_cap must be positive"));
        }
        Ok(())
    }

    /// Elements per sample.
    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Per-sample latent part shapes (h, w, c), split points first.
    pub fn latent_shapes(&self) -> Vec<[usize; 3]> {
        let (mut h, mut w, mut c) = (self.height, self.width, self.channels);
        let mut out = Vec::new();
        for s in 0..self.num_scales {
            h /= 2;
            w /= 2;
            c *= 4;
            if s + 1 < self.num_scales {
                out.push([h, w, c - c / 2]);
                c /= 2;
            } else {
                out.push([h, w, c]);
            }
        }
        out
    }
}

/// ActNorm → invertible 1×1 mix → affine coupling.
#[derive(Clone, Debug)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub mix: Inv1x1,
    pub coupling: Coupling,
}

#[derive(Clone, Debug)]
pub struct ScaleBlock {
    pub steps: Vec<FlowStep>,
    /// Channels entering the steps (after squeeze).
    pub channels: usize,
    /// Whether half the channels leave for the latent after this block.
    pub split: bool,
}

/// Latent code: one tensor per split point plus the final block output,
/// each shaped N×h×w×c.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub parts: Vec<Tensor>,
}

impl Latent {
    pub fn numel(&self) -> usize {
        self.parts.iter().map(Tensor::len).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.parts.iter().fold(0.0, |s, p| s + p.sum_squares())
    }
}

/// Output of a differentiable forward pass.
pub struct FlowTrace {
    pub parts: Vec<Var>,
    /// Batch-summed log|det ∂F/∂y|.
    pub logdet: Var,
    /// Per-layer log-determinants, in application order.
    pub layer_logdets: Vec<(String, Var)>,
}

/// Multi-scale bijection from label-probability maps to a standard normal
/// latent.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub scales: Vec<ScaleBlock>,
}

impl FlowModel {
    /// Randomly initialized model: rotation-initialized mixes, zero output
    /// convolutions in every coupling, ActNorms awaiting data init.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |prefix, c, cfg| FlowStep {
            actnorm: ActNorm::new(&format!("{prefix}.actnorm"), c),
            mix: Inv1x1::random(&format!("{prefix}.inv1x1"), c, &mut rng),
            coupling: Coupling::new(
                &format!("{prefix}.coupling"),
                c,
                cfg.hidden,
                cfg.scale_cap,
                &mut rng,
            ),
        })
    }

    /// Every layer the identity: unit ActNorms (marked initialized), identity
    /// mixes, zeroed couplings.
    pub fn identity(config: FlowConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self::build(config, |prefix, c, cfg| FlowStep {
            actnorm: ActNorm::identity(&format!("{prefix}.actnorm"), c),
            mix: Inv1x1::identity(&format!("{prefix}.inv1x1"), c),
            coupling: Coupling::new(
                &format!("{prefix}.coupling"),
                c,
                cfg.hidden,
                cfg.scale_cap,
                &mut rng,
            ),
        })
    }

    fn build(
        config: FlowConfig,
        mut make: impl FnMut(&str, usize, &FlowConfig) -> FlowStep,
    ) -> Result<Self> {
        config.validate()?;
        let mut scales = Vec::with_capacity(config.num_scales);
        let mut c = config.channels;
        for s in 0..config.num_scales {
            c *= 4;
            let steps = (0..config.steps_per_scale)
                .map(|k| make(&format!("{s}.{k}"), c, &config))
                .collect();
            let split = s + 1 < config.num_scales;
            scales.push(ScaleBlock {
                steps,
                channels: c,
                split,
            });
            if split {
                c /= 2;
            }
        }
        Ok(Self { config, scales })
    }

    pub fn is_initialized(&self) -> bool {
        self.steps().all(|s| s.actnorm.initialized)
    }

    pub fn steps(&self) -> impl Iterator<Item = &FlowStep> {
        self.scales.iter().flat_map(|s| s.steps.iter())
    }

    /// Adds `N(0, std²)` noise to every parameter (test and diagnostics aid:
    /// moves the model away from identity couplings).
    pub fn jitter(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("non-negative std");
        for p in self.params_mut() {
            for v in p.value.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }

    fn as_batch(&self, y: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        match *y.shape() {
            [h, w, ch] if [h, w, ch] == [c.height, c.width, c.channels] => {
                y.reshape(&[1, h, w, ch])
            }
            [_, h, w, ch] if [h, w, ch] == [c.height, c.width, c.channels] => Ok(y.clone()),
            _ => Err(Error::invalid(format!(
                "flow input {:?} does not match model topology {}x{}x{}",
                y.shape(),
                c.height,
                c.width,
                c.channels
            ))),
        }
    }

    /// Differentiable forward over an N×H×W×C variable.
    pub fn forward_graph(&self, g: &mut Graph, y: Var, trainable: bool) -> Result<FlowTrace> {
        let c = &self.config;
        let shape = g.shape(y).to_vec();
        if shape.len() != 4 || shape[1..] != [c.height, c.width, c.channels] {
            return Err(Error::invalid(format!(
                "flow input {shape:?} does not match model topology {}x{}x{} \
                 (spatial dims must be divisible by 2^{})",
                c.height, c.width, c.channels, c.num_scales
            )));
        }
        let mut x = y;
        let mut parts = Vec::new();
        let mut layer_logdets = Vec::new();
        for (s, block) in self.scales.iter().enumerate() {
            x = squeeze(g, x)?;
            for (k, step) in block.steps.iter().enumerate() {
                let (out, ld) = step.actnorm.forward(g, x, trainable)?;
                layer_logdets.push((format!("{s}.{k}.actnorm"), ld));
                let (out, ld) = step.mix.forward(g, out, trainable)?;
                layer_logdets.push((format!("{s}.{k}.inv1x1"), ld));
                let (out, ld) = step.coupling.forward(g, out, trainable)?;
                layer_logdets.push((format!("{s}.{k}.coupling"), ld));
                x = out;
            }
            if block.split {
                let ch = block.channels;
                parts.push(g.slice_axis(x, 3, ch / 2..ch)?);
                x = g.slice_axis(x, 3, 0..ch / 2)?;
            }
        }
        parts.push(x);
        let mut logdet = g.constant(Tensor::scalar(0.0));
        for (_, ld) in &layer_logdets {
            logdet = g.add(logdet, *ld)?;
        }
        Ok(FlowTrace {
            parts,
            logdet,
            layer_logdets,
        })
    }

    /// Batch-summed negative log-likelihood under the standard normal prior:
    /// `(D/2)·log 2π + ½·Σz² − logdet`.
    pub fn nll_graph(&self, g: &mut Graph, y: Var, trainable: bool) -> Result<Var> {
        let trace = self.forward_graph(g, y, trainable)?;
        let mut sq = g.constant(Tensor::scalar(0.0));
        let mut d = 0usize;
        for &p in &trace.parts {
            d += g.value(p).len();
            let p2 = g.mul(p, p)?;
            let s = g.sum(p2);
            sq = g.add(sq, s)?;
        }
        let half = g.scale(sq, 0.5);
        let prior = g.add_scalar(half, 0.5 * d as f64 * (2.0 * PI).ln());
        g.sub(prior, trace.logdet)
    }

    /// `z = F(y)` and log|det ∂F/∂y| for an H×W×C (or N×H×W×C, batch-summed)
    /// input.
    pub fn forward(&self, y: &Tensor) -> Result<(Latent, f64)> {
        let batch = self.as_batch(y)?;
        let mut g = Graph::new();
        let yv = g.constant(batch);
        let trace = self.forward_graph(&mut g, yv, false)?;
        let parts = trace.parts.iter().map(|&p| g.value(p).clone()).collect();
        Ok((Latent { parts }, g.value(trace.logdet).item()))
    }

    /// Per-layer log-determinants of a forward pass, in application order.
    pub fn layer_logdets(&self, y: &Tensor) -> Result<Vec<(String, f64)>> {
        let batch = self.as_batch(y)?;
        let mut g = Graph::new();
        let yv = g.constant(batch);
        let trace = self.forward_graph(&mut g, yv, false)?;
        Ok(trace
            .layer_logdets
            .iter()
            .map(|(name, v)| (name.clone(), g.value(*v).item()))
            .collect())
    }

    pub fn inverse(&self, z: &Latent) -> Result<Tensor> {
        let shapes = self.config.latent_shapes();
        if z.parts.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "latent has {} parts, model expects {}",
                z.parts.len(),
                shapes.len()
            )));
        }
        let n = z.parts[0].shape().first().copied().unwrap_or(0);
        for (p, s) in z.parts.iter().zip(&shapes) {
            if p.rank() != 4 || p.shape()[0] != n || p.shape()[1..] != s[..] {
                return Err(Error::invalid(format!(
                    "latent part {:?} does not match expected N x {s:?}",
                    p.shape()
                )));
            }
        }
        let mut x = z.parts.last().unwrap().clone();
        for (s, block) in self.scales.iter().enumerate().rev() {
            if block.split {
                let mut g = Graph::new();
                let a = g.constant(x);
                let b = g.constant(z.parts[s].clone());
                let cat = g.concat(&[a, b], 3)?;
                x = g.value(cat).clone();
            }
            for step in block.steps.iter().rev() {
                x = step.coupling.inverse(&x)?;
                x = step.mix.inverse(&x)?;
                x = step.actnorm.inverse(&x)?;
            }
            x = unsqueeze_tensor(&x)?;
        }
        Ok(x)
    }

    /// Inverse for a single-sample latent, returned as H×W×C.
    pub fn inverse_single(&self, z: &Latent) -> Result<Tensor> {
        let c = &self.config;
        self.inverse(z)?.into_reshaped(&[c.height, c.width, c.channels])
    }

    /// Negative log-likelihood of one H×W×C map.
    pub fn nll(&self, y: &Tensor) -> Result<f64> {
        let batch = self.as_batch(y)?;
        let mut g = Graph::new();
        let yv = g.constant(batch);
        let v = self.nll_graph(&mut g, yv, false)?;
        Ok(g.value(v).item())
    }

    /// Data-dependent ActNorm initialization on an N×H×W×C batch, layer by
    /// layer from the input side.
    pub fn initialize(&mut self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 4 || batch.shape()[0] < 2 {
            return Err(Error::invalid(format!(
                "actnorm init needs an N×H×W×C batch with N ≥ 2, got {:?}",
                batch.shape()
            )));
        }
        let mut x = self.as_batch(batch)?;
        for block in &mut self.scales {
            x = squeeze_tensor(&x)?;
            for step in &mut block.steps {
                step.actnorm.initialize_from(&x)?;
                let mut g = Graph::new();
                let v = g.constant(x);
                let (v, _) = step.actnorm.forward(&mut g, v, false)?;
                let (v, _) = step.mix.forward(&mut g, v, false)?;
                let (v, _) = step.coupling.forward(&mut g, v, false)?;
                x = g.value(v).clone();
            }
            if block.split {
                let mut g = Graph::new();
                let v = g.constant(x);
                let keep = g.slice_axis(v, 3, 0..block.channels / 2)?;
                x = g.value(keep).clone();
            }
        }
        Ok(())
    }

    /// Latent of zeros with the single-sample topology.
    pub fn zero_latent(&self) -> Latent {
        Latent {
            parts: self
                .config
                .latent_shapes()
                .iter()
                .map(|&[h, w, c]| Tensor::zeros(&[1, h, w, c]))
                .collect(),
        }
    }

    /// Decodes `z ~ N(0, temperature²·I)` drawn from a generator seeded with
    /// `seed`.
    pub fn sample(&self, seed: u64, temperature: f64) -> Result<Tensor> {
        if !(temperature >= 0.0) {
            return Err(Error::invalid("temperature must be non-negative"));
        }
        if !self.is_initialized() {
            return Err(Error::State("sampling from an uninitialized flow".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = self.zero_latent();
        for part in &mut z.parts {
            for v in part.data_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = temperature * e;
            }
        }
        self.inverse_single(&z)
    }
}

impl Module for FlowModel {
    fn params(&self) -> Vec<&Param> {
        self.steps()
            .flat_map(|s| {
                let mut v = s.actnorm.params();
                v.extend(s.mix.params());
                v.extend(s.coupling.params());
                v
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.scales
            .iter_mut()
            .flat_map(|b| b.steps.iter_mut())
            .flat_map(|s| {
                let mut v = s.actnorm.params_mut();
                v.extend(s.mix.params_mut());
                v.extend(s.coupling.params_mut());
                v
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FlowConfig {
        FlowConfig {
            height: 4,
            width: 4,
            channels: 2,
            num_scales: 2,
            steps_per_scale: 2,
            hidden: 4,
            scale_cap: 2.0,
        }
    }

    #[test]
    fn latent_shapes_cover_input() {
        let cfg = FlowConfig::default();
        let total: usize = cfg.latent_shapes().iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(total, cfg.dim());
        assert_eq!(cfg.latent_shapes(), vec![[16, 16, 12], [8, 8, 48]]);
    }

    #[test]
    fn identity_model_nll_closed_form() {
        let m = FlowModel::identity(small()).unwrap();
        let zeros = Tensor::zeros(&[4, 4, 2]);
        let want = 16.0 * (2.0 * PI).ln();
        assert!((m.nll(&zeros).unwrap() - want).abs() < 1e-10);
        assert!((want - 29.40603).abs() < 1e-4);

        let mut y = Tensor::zeros(&[4, 4, 2]);
        // Σy² = 10
        y.data_mut()[0] = 3.0;
        y.data_mut()[5] = 1.0;
        assert!((m.nll(&y).unwrap() - (want + 5.0)).abs() < 1e-10);
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = FlowConfig {
            height: 6,
            ..small()
        };
        assert!(FlowModel::identity(cfg).is_err());
        let m = FlowModel::identity(small()).unwrap();
        assert!(m.nll(&Tensor::zeros(&[6, 4, 2])).is_err());
    }

    #[test]
    fn uninitialized_forward_is_state_error() {
        let m = FlowModel::new(small(), 1).unwrap();
        assert!(matches!(
            m.nll(&Tensor::zeros(&[4, 4, 2])),
            Err(Error::State(_))
        ));
        assert!(matches!(m.sample(0, 1.0), Err(Error::State(_))));
    }

    #[test]
    fn inverse_rejects_bad_latent() {
        let m = FlowModel::identity(small()).unwrap();
        let mut z = m.zero_latent();
        z.parts.pop();
        assert!(m.inverse(&z).is_err());
    }
}
