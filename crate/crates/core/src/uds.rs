//! Unaligned domain score, estimated through its likelihood upper bound,
//! and exact discrete oracles for the divergence/entropy relations behind it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::losses::{tau_smoothness, ProbMap, TauConfig};
use crate::numerics::Tensor;

/// Monte-Carlo mean of `nll + λτ·τ` over target predictions ("UDS-UB").
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdsEstimate {
    pub mean_nll: f64,
    pub mean_tau: f64,
    pub value: f64,
    pub n_samples: usize,
}

impl UdsEstimate {
    /// Per-sample `(nll, tau)` terms, averaged in the given order.
    pub fn from_terms(terms: &[(f64, f64)], lambda_tau: f64) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("UDS estimate over an empty set"));
        }
        let n = terms.len() as f64;
        let mean_nll = terms.iter().fold(0.0, |s, t| s + t.0) / n;
        let mean_tau = terms.iter().fold(0.0, |s, t| s + t.1) / n;
        Ok(Self {
            mean_nll,
            mean_tau,
            value: mean_nll + lambda_tau * mean_tau,
            n_samples: terms.len(),
        })
    }
}

/// One segmenter prediction on a target image, keyed by sample id.
pub struct TargetPrediction {
    pub id: usize,
    pub pred: ProbMap,
    pub image: Tensor,
}

/// NLL and smoothness of a single prediction.
pub fn uds_terms(flow: &FlowModel, pred: &ProbMap, image: &Tensor, cfg: &TauConfig) -> Result<(f64, f64)> {
    Ok((flow.nll(&pred.values)?, tau_smoothness(pred, image, cfg)?))
}

/// Estimate over predictions, reduced in ascending sample-id order so the
/// result does not depend on dataset order.
pub fn uds_estimate(
    flow: &FlowModel,
    preds: &[TargetPrediction],
    cfg: &TauConfig,
    lambda_tau: f64,
) -> Result<UdsEstimate> {
    let mut order: Vec<&TargetPrediction> = preds.iter().collect();
    order.sort_by_key(|p| p.id);
    let terms = order
        .iter()
        .map(|p| uds_terms(flow, &p.pred, &p.image, cfg))
        .collect::<Result<Vec<_>>>()?;
    UdsEstimate::from_terms(&terms, lambda_tau)
}

/// Probability mass function over a finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("distribution entries must be finite and >= 0"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("distribution sums to {s}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0) {
            return Err(Error::invalid("weights must have positive total"));
        }
        Self::new(w.iter().map(|v| v / s).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

fn check_support(p: &DiscreteDist, q: &DiscreteDist) -> Result<()> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::invalid(format!(
            "supports differ: {} vs {}",
            p.probs.len(),
            q.probs.len()
        )));
    }
    if let Some(i) = (0..p.probs.len()).find(|&i| p.probs[i] > 0.0 && q.probs[i] <= 0.0) {
        return Err(Error::Domain {
            op: "kl_discrete",
            index: i,
            value: q.probs[i],
        });
    }
    Ok(())
}

/// `Σ p log(p/q)`, zero-mass terms of `p` skipped.
pub fn kl_discrete(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    check_support(p, q)?;
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .filter(|(&a, _)| a > 0.0)
        .fold(0.0, |s, (&a, &b)| s + a * (a / b).ln()))
}

pub fn entropy_discrete(p: &DiscreteDist) -> f64 {
    -p.probs
        .iter()
        .filter(|&&a| a > 0.0)
        .fold(0.0, |s, &a| s + a * a.ln())
}

/// `−Σ p log q`.
pub fn cross_entropy_discrete(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    check_support(p, q)?;
    Ok(-p.probs
        .iter()
        .zip(&q.probs)
        .filter(|(&a, _)| a > 0.0)
        .fold(0.0, |s, (&a, &b)| s + a * b.ln()))
}

/// Whether the cross-entropy under `q` bounds the entropy of `p` from above.
pub fn cross_entropy_bound_check(p: &DiscreteDist, q: &DiscreteDist) -> Result<bool> {
    Ok(cross_entropy_discrete(p, q)? >= entropy_discrete(p) - 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: &[f64]) -> DiscreteDist {
        DiscreteDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn estimate_of_one_and_duplicates() {
        let one = UdsEstimate::from_terms(&[(5.0, 0.2)], 1.0).unwrap();
        assert_eq!(one.value, 5.0 + 0.2);
        let dup = UdsEstimate::from_terms(&[(5.0, 0.2); 4], 1.0).unwrap();
        assert_eq!(dup.value, one.value);
        assert!(UdsEstimate::from_terms(&[], 1.0).is_err());
    }

    #[test]
    fn discrete_closed_forms() {
        let p = d(&[0.5, 0.5]);
        assert_eq!(kl_discrete(&p, &p).unwrap(), 0.0);
        let q = d(&[0.25, 0.75]);
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_discrete(&p, &q).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.14384).abs() < 1e-5);
        assert_eq!(entropy_discrete(&d(&[0.0, 1.0, 0.0])), 0.0);
        assert!((entropy_discrete(&d(&[0.25; 4])) - 4f64.ln()).abs() < 1e-15);
        assert!((entropy_discrete(&d(&[0.9, 0.1])) - 0.32508).abs() < 1e-5);
    }

    #[test]
    fn support_violation_is_domain_error() {
        let p = d(&[0.5, 0.5]);
        let q = d(&[1.0, 0.0]);
        assert!(matches!(
            kl_discrete(&p, &q),
            Err(Error::Domain { index: 1, .. })
        ));
        assert!(kl_discrete(&q, &p).is_ok());
    }

    #[test]
    fn near_disjoint_support_has_large_gap() {
        let p = d(&[1.0 - 2e-9, 1e-9, 1e-9]);
        let q = DiscreteDist::from_weights(&[1e-9, 0.5, 0.5]).unwrap();
        assert!(cross_entropy_bound_check(&p, &q).unwrap());
        assert!(cross_entropy_discrete(&p, &q).unwrap() - entropy_discrete(&p) > 10.0);
    }
}
