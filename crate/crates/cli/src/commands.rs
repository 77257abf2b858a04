use std::fs;
use std::path::{Path, PathBuf};

use bimal_core::flow::FlowModel;
use bimal_core::gradsuite::{check_flow, gradient_suite, TOLERANCE};
use bimal_core::losses::LabelMap;
use bimal_core::numerics::bten::Bten;
use bimal_core::scenegen::{validate_structure, DomainParams, SceneDataset};
use bimal_core::trainer::{
    append_csv, evaluate, train_flow, train_segmenter, write_csv, OracleSegmenter, SegMode, SegNet, Segmenter,
};
use bimal_core::Error;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, Resolved};
use crate::{Command, Global};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Core(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 4,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_) | Error::State(_) => 2,
                Error::Io { .. } | Error::Corrupt { .. } => 3,
                Error::Domain { .. } | Error::DegenerateBatch { .. } | Error::Inconsistent(_) | Error::NonFinite(_) => 4,
            },
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn out_dir(g: &Global) -> CliResult<&Path> {
    g.out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required for this command".into()))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(io(path))
}

/// Creates `dir` and records the resolved configuration inside it.
fn prepare(dir: &Path, cfg: &Resolved) -> CliResult {
    fs::create_dir_all(dir).map_err(io(dir))?;
    write_text(&dir.join("config.json"), &cfg.to_json())
}

fn check_scene(ds: &SceneDataset, cfg: &Resolved, path: &Path) -> CliResult {
    let s = &cfg.config.scene;
    if (ds.height(), ds.width()) != (s.height, s.width) {
        return Err(CliError::Usage(format!(
            "{}: dataset is {}x{}, config expects {}x{}",
            path.display(),
            ds.height(),
            ds.width(),
            s.height,
            s.width
        )));
    }
    Ok(())
}

fn load_flow(path: &Path) -> CliResult<FlowModel> {
    Ok(FlowModel::load(path)?.0)
}

pub fn run(global: &Global, command: &Command) -> CliResult {
    let cfg = Resolved::load(global.config.as_deref(), &global.sets, global.seed)?;
    let rc = &cfg.config;
    match command {
        Command::GenData { domain, n } => {
            if *n == 0 {
                return Err(CliError::Usage("--n must be >= 1".into()));
            }
            let out = out_dir(global)?;
            let mut ds = SceneDataset::generate(&rc.scene, &DomainParams::for_domain(*domain), *domain, *n, rc.seed)?;
            ds.manifest.config_hash = cfg.hash.clone();
            ds.save(out)?;
            println!(
                "gen-data domain={} n={} content_hash={} config_hash={}",
                domain.name(),
                n,
                ds.manifest.content_hash,
                cfg.hash
            );
        }
        Command::TrainFlow { data } => {
            let out = out_dir(global)?;
            let ds = SceneDataset::load(data)?;
            check_scene(&ds, &cfg, data)?;
            let mut flow = FlowModel::new(rc.flow_config(), rc.seed)?;
            let run = train_flow(&mut flow, &ds, &rc.flow_train())?;
            prepare(out, &cfg)?;
            flow.save(out, &cfg.hash)?;
            write_csv(&out.join("curve.csv"), &run.curve, &cfg.hash)?;
            let last = run.curve.last().and_then(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "train-flow steps={} initial_nll={:.6} last_nll={:.6} best_step={} monitor_initial={:.6} monitor_best={:.6}",
                run.curve.len() - 1,
                run.curve[0].loss.unwrap_or(f64::NAN),
                last,
                run.best_step,
                run.initial_monitor_nll(),
                run.best_monitor_nll()
            );
            if let Some(reason) = run.aborted {
                return Err(CliError::Numerical(format!("flow training aborted: {reason}")));
            }
        }
        Command::TrainSeg {
            mode,
            source,
            target,
            val,
            flow_ckpt,
        } => {
            let flow = match (mode, flow_ckpt) {
                (SegMode::Bimal, None) => {
                    return Err(CliError::Usage("--flow-ckpt is required with --mode bimal".into()))
                }
                (SegMode::Bimal, Some(p)) => Some(load_flow(p)?),
                _ => None,
            };
            let out = out_dir(global)?;
            let load = |p: &PathBuf| -> CliResult<SceneDataset> {
                let ds = SceneDataset::load(p)?;
                check_scene(&ds, &cfg, p)?;
                Ok(ds)
            };
            let (src, tgt, vds) = (load(source)?, load(target)?, load(val)?);
            let mut seg = SegNet::new(&rc.train.widths, rc.seed)?;
            let run = train_segmenter(&mut seg, flow.as_ref(), &src, &tgt, &vds, *mode, &rc.seg_train())?;
            prepare(out, &cfg)?;
            seg.save(out, &cfg.hash)?;
            write_csv(&out.join("curve.csv"), &run.curve, &cfg.hash)?;
            println!(
                "train-seg mode={} steps={} best_step={} val_miou={:.6}",
                mode.name(),
                run.curve.len(),
                run.best_step,
                run.best_val_miou
            );
            if let Some(reason) = run.aborted {
                return Err(CliError::Numerical(format!("segmenter training aborted: {reason}")));
            }
        }
        Command::Eval {
            seg_ckpt,
            oracle,
            data,
            flow_ckpt,
        } => {
            let out = global
                .out
                .as_deref()
                .ok_or_else(|| CliError::Usage("--out FILE.csv is required for eval".into()))?;
            let ds = SceneDataset::load(data)?;
            let flow = flow_ckpt.as_deref().map(load_flow).transpose()?;
            let seg: Box<dyn Segmenter> = match seg_ckpt {
                Some(p) if !oracle => Box::new(SegNet::load(p)?.0),
                _ => Box::new(OracleSegmenter),
            };
            let tc = rc.seg_train();
            let m = evaluate(seg.as_ref(), flow.as_ref(), &ds, &tc.tau, tc.weights.lambda_tau, 0)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(io(parent))?;
            }
            append_csv(out, &m, &cfg.hash)?;
            let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
            println!(
                "eval n={} miou={} mean_entropy={} flow_nll_mean={} uds_ub={}",
                ds.len(),
                opt(m.miou),
                opt(m.mean_entropy),
                opt(m.flow_nll_mean),
                opt(m.uds_ub)
            );
        }
        Command::SampleFlow {
            flow_ckpt,
            n,
            temperature,
        } => {
            if *n == 0 {
                return Err(CliError::Usage("--n must be >= 1".into()));
            }
            let out = out_dir(global)?;
            let flow = load_flow(flow_ckpt)?;
            let fc = &flow.config;
            let (h, w, c) = (fc.height, fc.width, fc.channels);
            let mut rng = ChaCha8Rng::seed_from_u64(rc.seed);
            let mut labels = Vec::with_capacity(n * h * w);
            let mut valid = 0;
            for _ in 0..*n {
                let y = flow.sample(rng.next_u64(), *temperature)?;
                if !y.all_finite() {
                    return Err(CliError::Numerical("flow sample is not finite".into()));
                }
                let map: Vec<u8> = y.data().chunks(c).map(argmax).collect();
                if validate_structure(&LabelMap::new(h, w, map.clone())?).is_ok() {
                    valid += 1;
                }
                labels.extend(map);
            }
            prepare(out, &cfg)?;
            let ten = out.join("samples.ten");
            Bten::u8(vec![*n, h, w], labels).write(&ten)?;
            let summary = serde_json::json!({
                "n": n,
                "temperature": temperature,
                "valid": valid,
                "validity_rate": valid as f64 / *n as f64,
                "config_hash": cfg.hash,
            });
            write_text(&out.join("samples.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
            println!(
                "sample-flow n={n} temperature={temperature} valid={valid} validity_rate={:.4}",
                valid as f64 / *n as f64
            );
        }
        Command::GradCheck { jitter } => {
            if !(*jitter >= 0.0) {
                return Err(CliError::Usage("--jitter must be >= 0".into()));
            }
            let flow = check_flow(*jitter, rc.seed)?;
            let reports = gradient_suite(&flow, rc.seed)?;
            let mut failed = Vec::new();
            for r in &reports {
                println!("{:<28} {:.3e}", r.component, r.max_rel_error);
                if !r.passed() {
                    failed.push(r.component.clone());
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Numerical(format!(
                    "gradient check above {TOLERANCE:e}: {}",
                    failed.join(", ")
                )));
            }
            println!("grad-check ok components={}", reports.len());
        }
    }
    Ok(())
}

/// Lowest index among maximal entries.
fn argmax(row: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u8
}
