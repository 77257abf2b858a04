use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::segnet::Segmenter;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::losses::{entropy_loss, TauConfig};
use crate::scenegen::{SceneDataset, CLASS_NAMES, NUM_CLASSES};
use crate::uds::{uds_terms, UdsEstimate};

/// Row type of every CSV the trainer writes. Optional fields are empty in
/// rows where they were not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: Option<f64>,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub flow_nll_mean: Option<f64>,
    pub uds_ub: Option<f64>,
    /// Excluded from CSV output so files are reproducible byte for byte.
    pub wall_ms: u128,
}

impl MetricsRecord {
    pub fn loss_only(step: usize, loss: f64) -> Self {
        Self {
            step,
            loss: Some(loss),
            per_class_iou: vec![None; NUM_CLASSES],
            miou: None,
            mean_entropy: None,
            flow_nll_mean: None,
            uds_ub: None,
            wall_ms: 0,
        }
    }
}

pub fn csv_header() -> String {
    let mut h = String::from("step,loss,miou,mean_entropy,flow_nll_mean,uds_ub");
    for name in CLASS_NAMES {
        write!(h, ",iou_{name}").unwrap();
    }
    h.push_str(",config_hash");
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

pub fn csv_row(r: &MetricsRecord, config_hash: &str) -> String {
    let mut s = format!(
        "{},{},{},{},{},{}",
        r.step,
        opt(r.loss),
        opt(r.miou),
        opt(r.mean_entropy),
        opt(r.flow_nll_mean),
        opt(r.uds_ub)
    );
    for c in 0..NUM_CLASSES {
        write!(s, ",{}", opt(r.per_class_iou.get(c).copied().flatten())).unwrap();
    }
    write!(s, ",{config_hash}").unwrap();
    s
}

/// Writes `rows` under the fixed header, replacing any existing file.
pub fn write_csv(path: &Path, rows: &[MetricsRecord], config_hash: &str) -> Result<()> {
    let mut text = csv_header();
    text.push('\n');
    for r in rows {
        text.push_str(&csv_row(r, config_hash));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn append_csv(path: &Path, row: &MetricsRecord, config_hash: &str) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(&csv_header());
        text.push('\n');
    }
    text.push_str(&csv_row(row, config_hash));
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// `confusion[gt][pred]` pixel counts.
pub type Confusion = [[u64; NUM_CLASSES]; NUM_CLASSES];

pub fn confusion(pred: &[u8], gt: &[u8]) -> Confusion {
    let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &g) in pred.iter().zip(gt) {
        m[g as usize][p as usize] += 1;
    }
    m
}

/// Per-class IoU and their mean over classes present in prediction or
/// ground truth.
pub fn iou_from_confusion(m: &Confusion) -> (Vec<Option<f64>>, f64) {
    let per: Vec<Option<f64>> = (0..NUM_CLASSES)
        .map(|c| {
            let tp = m[c][c];
            let gt: u64 = m[c].iter().sum();
            let pred: u64 = m.iter().map(|row| row[c]).sum();
            let union = gt + pred - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per, miou)
}

/// Worker count from `BIMAL_THREADS` (default 1).
pub fn worker_count() -> usize {
    std::env::var("BIMAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

struct SampleEval {
    confusion: Confusion,
    entropy: f64,
    uds: Option<(f64, f64)>,
}

fn eval_sample(
    seg: &dyn Segmenter,
    flow: Option<&FlowModel>,
    ds: &SceneDataset,
    i: usize,
    tau: &TauConfig,
) -> Result<SampleEval> {
    let pred = seg.predict(ds, i)?;
    let gt = ds.label_map(i);
    let pixels = (gt.height * gt.width) as f64;
    let uds = match flow {
        Some(f) => Some(uds_terms(f, &pred, &ds.image(i)?, tau)?),
        None => None,
    };
    Ok(SampleEval {
        confusion: confusion(&pred.argmax(), &gt.labels),
        entropy: entropy_loss(&pred)? / pixels,
        uds,
    })
}

/// Metrics over every sample of `ds`. Samples may be processed on up to
/// [`worker_count`] threads; results are merged in index order.
pub fn evaluate(
    seg: &dyn Segmenter,
    flow: Option<&FlowModel>,
    ds: &SceneDataset,
    tau: &TauConfig,
    lambda_tau: f64,
    step: usize,
) -> Result<MetricsRecord> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    let start = Instant::now();
    let run = || -> Result<Vec<SampleEval>> {
        (0..ds.len())
            .into_par_iter()
            .map(|i| eval_sample(seg, flow, ds, i, tau))
            .collect()
    };
    let threads = worker_count();
    let samples = if threads == 1 {
        (0..ds.len())
            .map(|i| eval_sample(seg, flow, ds, i, tau))
            .collect::<Result<Vec<_>>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?
            .install(run)?
    };
    let mut total = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    let mut entropy = 0.0;
    for s in &samples {
        for (row, srow) in total.iter_mut().zip(&s.confusion) {
            for (a, b) in row.iter_mut().zip(srow) {
                *a += b;
            }
        }
        entropy += s.entropy;
    }
    let (per_class_iou, miou) = iou_from_confusion(&total);
    let uds = match flow {
        Some(_) => {
            let terms: Vec<(f64, f64)> = samples.iter().map(|s| s.uds.expect("flow given")).collect();
            Some(UdsEstimate::from_terms(&terms, lambda_tau)?)
        }
        None => None,
    };
    Ok(MetricsRecord {
        step,
        loss: None,
        per_class_iou,
        miou: Some(miou),
        mean_entropy: Some(entropy / samples.len() as f64),
        flow_nll_mean: uds.map(|u| u.mean_nll),
        uds_ub: uds.map(|u| u.value),
        wall_ms: start.elapsed().as_millis(),
    })
}
