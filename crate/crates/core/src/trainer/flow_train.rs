use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsRecord;
use super::optim::{OptimConfig, Sgd};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::numerics::{Graph, Module, Tensor};
use crate::scenegen::{labels_to_flow_input_with, SceneDataset, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub optim: OptimConfig,
    pub label_smoothing: f64,
    pub dequant_noise: f64,
    /// Steps between evaluations of the fixed monitor set.
    pub eval_every: usize,
    /// Leading training samples used as the monitor set.
    pub monitor_size: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                learning_rate: 2e-3,
                batch_size: 8,
                max_steps: 2000,
                ..OptimConfig::default()
            },
            label_smoothing: 0.05,
            dequant_noise: 0.01,
            eval_every: 100,
            monitor_size: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowTraining {
    /// Mean per-sample NLL of each step's batch, before that step's update.
    /// Row 0 is the initial model.
    pub curve: Vec<MetricsRecord>,
    /// `(step, mean NLL)` on the monitor set.
    pub monitor: Vec<(usize, f64)>,
    pub best_step: usize,
    pub aborted: Option<String>,
}

impl FlowTraining {
    pub fn initial_monitor_nll(&self) -> f64 {
        self.monitor[0].1
    }

    pub fn best_monitor_nll(&self) -> f64 {
        self.monitor
            .iter()
            .find(|(s, _)| *s == self.best_step)
            .map(|m| m.1)
            .expect("best step is a monitor step")
    }
}

/// Dequantized flow inputs for the given samples, stacked `N×H×W×C`.
pub fn flow_batch(
    ds: &SceneDataset,
    idx: &[usize],
    eps: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let maps = idx
        .iter()
        .map(|&i| labels_to_flow_input_with(&ds.label_map(i), NUM_CLASSES, eps, noise, rng))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&maps)
}

fn mean_nll(flow: &FlowModel, batch: &Tensor) -> Result<f64> {
    let n = batch.shape()[0] as f64;
    Ok(flow.nll(batch)? / n)
}

/// Fits `flow` to dequantized source label maps by minimizing the mean
/// NLL per dimension. ActNorms are initialized on the first batch if needed. On return
/// `flow` holds the parameters with the lowest monitor NLL; a non-finite
/// loss stops training early and is reported in `aborted`.
pub fn train_flow(flow: &mut FlowModel, source: &SceneDataset, cfg: &FlowTrainConfig) -> Result<FlowTraining> {
    cfg.optim.validate()?;
    let b = cfg.optim.batch_size;
    if source.is_empty() || cfg.eval_every == 0 || cfg.monitor_size == 0 {
        return Err(Error::invalid("flow training needs data, eval_every >= 1 and monitor_size >= 1"));
    }
    let dim = flow.config.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> { (0..b).map(|_| rng.random_range(0..source.len())).collect() };

    let first_idx = draw(&mut rng);
    let mut batch = flow_batch(source, &first_idx, cfg.label_smoothing, cfg.dequant_noise, &mut rng)?;
    if !flow.is_initialized() {
        if b < 2 {
            return Err(Error::invalid("ActNorm initialization needs batch_size >= 2"));
        }
        flow.initialize(&batch)?;
    }

    let monitor_idx: Vec<usize> = (0..cfg.monitor_size.min(source.len())).collect();
    let mut mrng = ChaCha8Rng::seed_from_u64(cfg.optim.seed ^ 0x6d6f6e69746f72);
    let monitor_batch = flow_batch(source, &monitor_idx, cfg.label_smoothing, cfg.dequant_noise, &mut mrng)?;

    let mut monitor = vec![(0, mean_nll(flow, &monitor_batch)?)];
    let mut best = (0, monitor[0].1, flow.clone());
    let mut curve = Vec::with_capacity(cfg.optim.max_steps + 1);
    let mut sgd = Sgd::new();
    let mut aborted = None;

    for step in 0..=cfg.optim.max_steps {
        if step > 0 {
            let idx = draw(&mut rng);
            batch = flow_batch(source, &idx, cfg.label_smoothing, cfg.dequant_noise, &mut rng)?;
        }
        let mut g = Graph::new();
        let y = g.constant(batch.clone());
        let nll = flow.nll_graph(&mut g, y, step < cfg.optim.max_steps)?;
        // Optimized per dimension so step sizes do not scale with image size.
        let loss = g.scale(nll, 1.0 / (b * dim) as f64);
        let value = g.value(loss).item() * dim as f64;
        curve.push(MetricsRecord::loss_only(step, value));
        if !value.is_finite() {
            aborted = Some(format!("non-finite flow NLL {value} at step {step}"));
            break;
        }
        if step == cfg.optim.max_steps {
            break;
        }
        let grads = g.backward(loss)?;
        grads.accumulate(flow.params_mut())?;
        if let Err(e) = sgd.step(flow.params_mut(), &cfg.optim) {
            aborted = Some(format!("step {step}: {e}"));
            break;
        }
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.optim.max_steps {
            let m = mean_nll(flow, &monitor_batch)?;
            monitor.push((done, m));
            if m.is_finite() && m < best.1 {
                best = (done, m, flow.clone());
            }
        }
    }
    let (best_step, _, best_flow) = best;
    *flow = best_flow;
    Ok(FlowTraining {
        curve,
        monitor,
        best_step,
        aborted,
    })
}
