//! Segmentation objectives: supervised cross-entropy, normalized entropy,
//! the pairwise smoothness term, the flow-likelihood loss and the combined
//! training objective.
//!
//! Graph-level functions take `N×H×W×C` (or `H×W×C`) variables and return
//! the sum over every sample; [`total_objective`] takes batch means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::numerics::{Graph, Tensor, Var};

/// Probabilities below this are floored inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-pixel class distribution, `H×W×C` or `N×H×W×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub values: Tensor,
    pub log_values: Tensor,
}

impl ProbMap {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let lp = g.log_softmax_channels(l)?;
        let log_values = g.value(lp).clone();
        let values = log_values.map(f64::exp);
        Ok(Self { values, log_values })
    }

    /// Validates the per-pixel sums and derives floored log-probabilities.
    pub fn from_probs(values: Tensor) -> Result<Self> {
        let c = values.last_dim();
        if values.rank() < 2 || c < 2 {
            return Err(Error::invalid(format!(
                "probability map needs rank >= 2 and >= 2 classes, got {:?}",
                values.shape()
            )));
        }
        for (i, row) in values.data().chunks(c).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| !(0.0..=1.0 + 1e-9).contains(&v)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "pixel {i} is not a distribution (sum {s})"
                )));
            }
        }
        let log_values = values.map(|v| v.max(PROB_FLOOR).ln());
        Ok(Self { values, log_values })
    }

    pub fn uniform(shape: &[usize]) -> Self {
        let c = *shape.last().expect("non-scalar shape") as f64;
        Self {
            values: Tensor::full(shape, 1.0 / c),
            log_values: Tensor::full(shape, -c.ln()),
        }
    }

    pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<Self> {
        Self::from_probs(labels.one_hot(classes)?)
    }

    pub fn classes(&self) -> usize {
        self.values.last_dim()
    }

    /// Per-pixel argmax, ties resolved to the lowest class index.
    pub fn argmax(&self) -> Vec<u8> {
        self.values
            .data()
            .chunks(self.classes())
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Integer class map of one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::invalid(format!(
                "label map {height}x{width} given {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        one_hot(&self.labels, &[self.height, self.width], classes)
    }
}

/// One-hot encoding of `labels` into a tensor of shape `spatial × classes`.
pub fn one_hot(labels: &[u8], spatial: &[usize], classes: usize) -> Result<Tensor> {
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        return Err(Error::invalid(format!(
            "label {l} at pixel {i} outside [0, {classes})"
        )));
    }
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l as usize] = 1.0;
    }
    let mut shape = spatial.to_vec();
    shape.push(classes);
    Tensor::new(shape, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauForm {
    /// `Σ exp(−‖Δx‖²/2σ1² − ‖Δy‖²/2σ2²)`.
    Literal,
    /// `Σ exp(−‖Δx‖²/2σ1²) · ‖Δy‖²/2σ2²`.
    Bilateral,
}

/// Pairwise smoothness settings. Pairs are 4-connected neighbours, each
/// unordered pair counted in both orders.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauConfig {
    pub sigma1: f64,
    pub sigma2: f64,
    pub form: TauForm,
}

impl Default for TauConfig {
    fn default() -> Self {
        Self {
            sigma1: 0.1,
            sigma2: 0.5,
            form: TauForm::Bilateral,
        }
    }
}

impl TauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1 > 0.0 && self.sigma2 > 0.0) {
            return Err(Error::invalid(format!(
                "tau bandwidths must be positive, got sigma1={} sigma2={}",
                self.sigma1, self.sigma2
            )));
        }
        Ok(())
    }
}

/// Weights on the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 1e-3,
            lambda_tau: 1.0,
        }
    }
}

fn as_batch(g: &mut Graph, v: Var) -> Result<Var> {
    match g.shape(v).to_vec()[..] {
        [h, w, c] => g.reshape(v, &[1, h, w, c]),
        [_, _, _, _] => Ok(v),
        ref s => Err(Error::invalid(format!(
            "expected HxWxC or NxHxWxC, got {s:?}"
        ))),
    }
}

/// `−Σ log p[gt]` over all pixels; `log_probs` holds log-probabilities.
pub fn ce_graph(g: &mut Graph, log_probs: Var, labels: &[u8]) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    let c = *shape.last().unwrap_or(&0);
    if c == 0 || labels.len() * c != g.value(log_probs).len() {
        return Err(Error::invalid(format!(
            "cross-entropy: {} labels do not match prediction {shape:?}",
            labels.len()
        )));
    }
    let mask = one_hot(labels, &shape[..shape.len() - 1], c)?;
    let mask = g.constant(mask);
    let picked = g.mul(log_probs, mask)?;
    let s = g.sum(picked);
    Ok(g.neg(s))
}

/// `(−1/ln C) Σ p·log p` from log-probabilities.
pub fn entropy_graph(g: &mut Graph, log_probs: Var) -> Result<Var> {
    let c = g.value(log_probs).last_dim();
    if c < 2 {
        return Err(Error::invalid("entropy needs at least 2 classes"));
    }
    let p = g.exp(log_probs);
    let plp = g.mul(p, log_probs)?;
    let s = g.sum(plp);
    Ok(g.scale(s, -1.0 / (c as f64).ln()))
}

/// Colour-affinity weights `exp(−‖Δx‖²/2σ1²)` between each pixel and its
/// successor along `axis` (1 = rows, 2 = columns) of an `N×H×W×3` image.
fn color_weights(image: &Tensor, axis: usize, sigma1: f64) -> Result<Tensor> {
    let [n, h, w, ch] = image.shape()[..] else {
        unreachable!("image is batched before this point")
    };
    let (dh, dw) = if axis == 1 { (1, 0) } else { (0, 1) };
    let px = |b: usize, i: usize, j: usize| &image.data()[((b * h + i) * w + j) * ch..][..ch];
    let k = 1.0 / (2.0 * sigma1 * sigma1);
    let mut out = Vec::with_capacity(n * (h - dh) * (w - dw));
    for b in 0..n {
        for i in 0..h - dh {
            for j in 0..w - dw {
                let d = px(b, i, j)
                    .iter()
                    .zip(px(b, i + dh, j + dw))
                    .fold(0.0, |s, (x, y)| s + (x - y) * (x - y));
                out.push((-k * d).exp());
            }
        }
    }
    Tensor::new(vec![n, h - dh, w - dw], out)
}

/// Pairwise smoothness of the probabilities `probs` guided by `image`
/// (treated as a constant).
pub fn tau_graph(g: &mut Graph, probs: Var, image: &Tensor, cfg: &TauConfig) -> Result<Var> {
    cfg.validate()?;
    let p = as_batch(g, probs)?;
    let image = match image.shape() {
        [h, w, c] => image.reshape(&[1, *h, *w, *c])?,
        _ => image.clone(),
    };
    let [n, h, w, c] = g.shape(p).to_vec()[..] else {
        unreachable!()
    };
    if image.rank() != 4 || image.shape()[..3] != [n, h, w] {
        return Err(Error::invalid(format!(
            "tau: image {:?} does not match prediction {:?}",
            image.shape(),
            [n, h, w, c]
        )));
    }
    let k2 = 1.0 / (2.0 * cfg.sigma2 * cfg.sigma2);
    let mut total = g.constant(Tensor::scalar(0.0));
    for axis in [2, 1] {
        let len = g.shape(p)[axis];
        if len < 2 {
            continue;
        }
        let weights = color_weights(&image, axis, cfg.sigma1)?;
        let a = g.slice_axis(p, axis, 1..len)?;
        let b = g.slice_axis(p, axis, 0..len - 1)?;
        let d = g.sub(a, b)?;
        let d2 = g.mul(d, d)?;
        let dist = g.sum_last(d2)?;
        let term = match cfg.form {
            TauForm::Bilateral => {
                let wv = g.constant(weights.map(|v| v * k2));
                g.mul(dist, wv)?
            }
            TauForm::Literal => {
                let e = g.scale(dist, -k2);
                let e = g.exp(e);
                let wv = g.constant(weights);
                g.mul(e, wv)?
            }
        };
        let s = g.sum(term);
        total = g.add(total, s)?;
    }
    // Each unordered pair appears once above; both orders contribute equally.
    Ok(g.scale(total, 2.0))
}

/// Flow negative log-likelihood of `probs` plus `lambda_tau` times the
/// smoothness term. Flow parameters are held fixed.
pub fn bimal_graph(
    g: &mut Graph,
    flow: &FlowModel,
    probs: Var,
    image: &Tensor,
    cfg: &TauConfig,
    lambda_tau: f64,
) -> Result<Var> {
    let p = as_batch(g, probs)?;
    let nll = flow.nll_graph(g, p, false)?;
    if lambda_tau == 0.0 {
        return Ok(nll);
    }
    let t = tau_graph(g, p, image, cfg)?;
    let t = g.scale(t, lambda_tau);
    g.add(nll, t)
}

/// The unlabeled-target term of the combined objective.
#[derive(Clone, Copy, Debug)]
pub enum TargetTerm<'a> {
    /// Flow likelihood plus weighted smoothness.
    Bimal {
        flow: &'a FlowModel,
        tau: &'a TauConfig,
    },
    /// Normalized entropy.
    Entropy,
}

/// `CE(source)/N_s + λ_t·target(target)/N_t`. With `lambda_t == 0` the
/// target graph is not built at all.
pub fn total_objective(
    g: &mut Graph,
    source_log_probs: Var,
    source_labels: &[u8],
    target_log_probs: Var,
    target_image: &Tensor,
    term: TargetTerm<'_>,
    weights: &LossWeights,
) -> Result<Var> {
    let ns = batch_size(g, source_log_probs);
    let ce = ce_graph(g, source_log_probs, source_labels)?;
    let ce = g.scale(ce, 1.0 / ns as f64);
    if weights.lambda_t == 0.0 {
        return Ok(ce);
    }
    let nt = batch_size(g, target_log_probs);
    let t = match term {
        TargetTerm::Bimal { flow, tau } => {
            let p = g.exp(target_log_probs);
            bimal_graph(g, flow, p, target_image, tau, weights.lambda_tau)?
        }
        TargetTerm::Entropy => entropy_graph(g, target_log_probs)?,
    };
    let t = g.scale(t, weights.lambda_t / nt as f64);
    g.add(ce, t)
}

fn batch_size(g: &Graph, v: Var) -> usize {
    match g.shape(v) {
        [n, _, _, _] => *n,
        _ => 1,
    }
}

pub fn supervised_ce(pred: &ProbMap, gt: &LabelMap) -> Result<f64> {
    let s = pred.values.shape();
    if s.len() != 3 || s[0] != gt.height || s[1] != gt.width {
        return Err(Error::invalid(format!(
            "prediction {s:?} does not match labels {}x{}",
            gt.height, gt.width
        )));
    }
    let mut g = Graph::new();
    let lp = g.constant(pred.log_values.clone());
    let v = ce_graph(&mut g, lp, &gt.labels)?;
    Ok(g.value(v).item())
}

pub fn entropy_loss(pred: &ProbMap) -> Result<f64> {
    let c = pred.classes();
    if c < 2 {
        return Err(Error::invalid("entropy needs at least 2 classes"));
    }
    let ln_c = (c as f64).ln();
    let total = pred
        .values
        .data()
        .chunks(c)
        .zip(pred.log_values.data().chunks(c))
        .fold(0.0, |s, (p, lp)| {
            // Per-pixel normalized entropy lies in [0, 1]; the clamp only
            // absorbs last-bit rounding.
            s + (-accurate_dot(p, lp) / ln_c).clamp(0.0, 1.0)
        });
    Ok(total)
}

/// `Σ aᵢ·bᵢ` with error-free products and compensated summation, skipping
/// terms where `aᵢ == 0` (so `0·log 0` is exactly 0).
fn accurate_dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        if x == 0.0 {
            continue;
        }
        let p = x * y;
        let perr = x.mul_add(y, -p);
        let t = sum + p;
        comp += if sum.abs() >= p.abs() {
            (sum - t) + p
        } else {
            (p - t) + sum
        };
        comp += perr;
        sum = t;
    }
    sum + comp
}

pub fn tau_smoothness(pred: &ProbMap, image: &Tensor, cfg: &TauConfig) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.values.clone());
    let v = tau_graph(&mut g, p, image, cfg)?;
    Ok(g.value(v).item())
}

pub fn bimal_loss(
    flow: &FlowModel,
    pred: &ProbMap,
    image: &Tensor,
    cfg: &TauConfig,
    lambda_tau: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.values.clone());
    let v = bimal_graph(&mut g, flow, p, image, cfg, lambda_tau)?;
    Ok(g.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;

    fn probs(h: usize, w: usize, px: &[f64]) -> ProbMap {
        let data = (0..h * w).flat_map(|_| px.to_vec()).collect();
        ProbMap::from_probs(Tensor::new(vec![h, w, px.len()], data).unwrap()).unwrap()
    }

    #[test]
    fn ce_closed_forms() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let u = ProbMap::uniform(&[2, 2, 4]);
        assert!((supervised_ce(&u, &gt).unwrap() - 4.0 * 4f64.ln()).abs() < 1e-12);
        let exact = ProbMap::one_hot(&gt, 4).unwrap();
        assert_eq!(supervised_ce(&exact, &gt).unwrap(), 0.0);
        let bad = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        assert!(supervised_ce(&u, &bad).is_err());
    }

    #[test]
    fn entropy_closed_forms() {
        for c in [2, 3, 6] {
            let u = ProbMap::uniform(&[3, 5, c]);
            assert_eq!(entropy_loss(&u).unwrap(), 15.0);
        }
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(entropy_loss(&ProbMap::one_hot(&gt, 2).unwrap()).unwrap(), 0.0);
        let p = probs(2, 2, &[0.75, 0.25]);
        let want = 4.0 * (0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) / -(2f64.ln());
        assert!((entropy_loss(&p).unwrap() - want).abs() < 1e-12);
        assert!((want - 3.2451).abs() < 1e-4);
    }

    #[test]
    fn tau_hand_cases() {
        let img = Tensor::zeros(&[1, 2, 3]);
        let one = TauConfig {
            sigma1: 1.0,
            sigma2: 1.0,
            form: TauForm::Bilateral,
        };
        let p = ProbMap::from_probs(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert!((tau_smoothness(&p, &img, &one).unwrap() - 2.0).abs() < 1e-12);

        let same = probs(3, 3, &[0.2, 0.8]);
        let img3 = Tensor::full(&[3, 3, 3], 0.5);
        assert_eq!(tau_smoothness(&same, &img3, &TauConfig::default()).unwrap(), 0.0);

        let literal = TauConfig {
            form: TauForm::Literal,
            ..TauConfig::default()
        };
        let pair = probs(1, 2, &[0.2, 0.8]);
        // One unordered pair at zero distance, both orders.
        assert!((tau_smoothness(&pair, &img, &literal).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bimal_reduces_to_nll() {
        let cfg = FlowConfig {
            height: 4,
            width: 4,
            channels: 2,
            num_scales: 2,
            steps_per_scale: 1,
            hidden: 4,
            scale_cap: 2.0,
        };
        let flow = FlowModel::identity(cfg).unwrap();
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[4, 4, 2]));
        let v = bimal_graph(&mut g, &flow, zero, &Tensor::zeros(&[4, 4, 3]), &TauConfig::default(), 0.0).unwrap();
        let want = 16.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((g.value(v).item() - want).abs() < 1e-10);

        let p = probs(4, 4, &[0.3, 0.7]);
        let img = Tensor::full(&[4, 4, 3], 0.1);
        assert_eq!(
            bimal_loss(&flow, &p, &img, &TauConfig::default(), 0.0).unwrap(),
            flow.nll(&p.values).unwrap()
        );
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(ProbMap::from_probs(Tensor::new(vec![1, 2], vec![0.5, 0.6]).unwrap()).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
        assert!(one_hot(&[7], &[1], 6).is_err());
        let bad = TauConfig {
            sigma1: 0.0,
            ..TauConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
