use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricsRecord};
use super::optim::{OptimConfig, Sgd};
use super::segnet::SegNet;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::losses::{ce_graph, total_objective, LossWeights, TargetTerm, TauConfig};
use crate::numerics::{Graph, Module};
use crate::scenegen::SceneDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegMode {
    SourceOnly,
    Bimal,
    Entmin,
}

impl SegMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(SegMode::SourceOnly),
            "bimal" => Ok(SegMode::Bimal),
            "entmin" => Ok(SegMode::Entmin),
            _ => Err(Error::invalid(format!("unknown mode {s:?} (source_only|bimal|entmin)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SegMode::SourceOnly => "source_only",
            SegMode::Bimal => "bimal",
            SegMode::Entmin => "entmin",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub tau: TauConfig,
    /// Fraction of steps trained with the target weight held at 0.
    pub warmup_frac: f64,
    pub eval_every: usize,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        // The CE is summed over pixels, so the step size is far below the
        // usual per-pixel-mean setting.
        Self {
            optim: OptimConfig {
                learning_rate: 3e-5,
                batch_size: 4,
                max_steps: 400,
                ..OptimConfig::default()
            },
            weights: LossWeights::default(),
            tau: TauConfig::default(),
            warmup_frac: 0.1,
            eval_every: 50,
        }
    }
}

impl SegTrainConfig {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.optim.max_steps as f64).ceil() as usize
    }

    /// Target weight in effect at 0-based `step`.
    pub fn lambda_t_at(&self, mode: SegMode, step: usize) -> f64 {
        if mode == SegMode::SourceOnly || step < self.warmup_steps() {
            0.0
        } else {
            self.weights.lambda_t
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegTraining {
    pub curve: Vec<MetricsRecord>,
    pub best_step: usize,
    pub best_val_miou: f64,
    pub aborted: Option<String>,
}

/// Trains `seg` with one source and one target batch per step. Both batches
/// are drawn every step in every mode, so the random stream does not depend
/// on the mode. `flow` is only read. Model selection uses source
/// validation mIoU among evaluations at or after the end of warm-up; on
/// return `seg` holds the selected parameters.
pub fn train_segmenter(
    seg: &mut SegNet,
    flow: Option<&FlowModel>,
    source: &SceneDataset,
    target: &SceneDataset,
    val: &SceneDataset,
    mode: SegMode,
    cfg: &SegTrainConfig,
) -> Result<SegTraining> {
    cfg.optim.validate()?;
    cfg.tau.validate()?;
    if mode == SegMode::Bimal && flow.is_none() {
        return Err(Error::invalid("bimal mode requires a trained flow"));
    }
    if source.is_empty() || target.is_empty() || cfg.eval_every == 0 {
        return Err(Error::invalid("segmenter training needs data and eval_every >= 1"));
    }
    let b = cfg.optim.batch_size;
    let steps = cfg.optim.max_steps;
    let warmup = cfg.warmup_steps().min(steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
    let mut sgd = Sgd::new();
    let mut curve = Vec::with_capacity(steps);
    let mut best: Option<(usize, f64, SegNet)> = None;
    let mut aborted = None;

    let consider = |step: usize, seg: &SegNet, best: &mut Option<(usize, f64, SegNet)>, row: &mut MetricsRecord| -> Result<()> {
        let m = evaluate(seg, None, val, &cfg.tau, cfg.weights.lambda_tau, step)?;
        let miou = m.miou.unwrap_or(0.0);
        row.miou = m.miou;
        row.per_class_iou = m.per_class_iou;
        row.mean_entropy = m.mean_entropy;
        if best.as_ref().is_none_or(|(_, v, _)| miou > *v) {
            *best = Some((step, miou, seg.clone()));
        }
        Ok(())
    };

    for step in 0..steps {
        let src_idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..source.len())).collect();
        let tgt_idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..target.len())).collect();
        let lambda_t = cfg.lambda_t_at(mode, step);

        let (src_img, src_lab) = source.batch(&src_idx)?;
        let mut g = Graph::new();
        let xs = g.constant(src_img);
        let ls = seg.forward_graph(&mut g, xs, true)?;
        let weights = LossWeights {
            lambda_t,
            lambda_tau: cfg.weights.lambda_tau,
        };
        let loss = if lambda_t == 0.0 {
            let ce = ce_graph(&mut g, ls, &src_lab)?;
            g.scale(ce, 1.0 / b as f64)
        } else {
            let (tgt_img, _) = target.batch(&tgt_idx)?;
            let xt = g.constant(tgt_img.clone());
            let lt = seg.forward_graph(&mut g, xt, true)?;
            let term = match mode {
                SegMode::Bimal => TargetTerm::Bimal {
                    flow: flow.expect("checked above"),
                    tau: &cfg.tau,
                },
                _ => TargetTerm::Entropy,
            };
            total_objective(&mut g, ls, &src_lab, lt, &tgt_img, term, &weights)?
        };
        let value = g.value(loss).item();
        let mut row = MetricsRecord::loss_only(step, value);
        if !value.is_finite() {
            aborted = Some(format!("non-finite segmenter loss {value} at step {step}"));
            curve.push(row);
            break;
        }
        let grads = g.backward(loss)?;
        grads.accumulate(seg.params_mut())?;
        if let Err(e) = sgd.step(seg.params_mut(), &cfg.optim) {
            aborted = Some(format!("step {step}: {e}"));
            curve.push(row);
            break;
        }
        let done = step + 1;
        if done >= warmup && (done % cfg.eval_every == 0 || done == steps) {
            consider(done, seg, &mut best, &mut row)?;
        }
        curve.push(row);
    }
    if best.is_none() {
        let mut row = MetricsRecord::loss_only(curve.len(), f64::NAN);
        row.loss = None;
        consider(curve.len(), seg, &mut best, &mut row)?;
    }
    let (best_step, best_val_miou, best_seg) = best.expect("at least one evaluation");
    *seg = best_seg;
    Ok(SegTraining {
        curve,
        best_step,
        best_val_miou,
        aborted,
    })
}
