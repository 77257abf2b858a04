//! Run configuration: one JSON object with flat dotted keys, validated
//! against the defaults below. Every key must already exist in the default
//! tree; values keep the JSON kind of their default.

use std::collections::BTreeMap;
use std::path::Path;

use bimal_core::flow::FlowConfig;
use bimal_core::losses::{LossWeights, TauConfig, TauForm};
use bimal_core::numerics::bten::sha256_hex;
use bimal_core::scenegen::{SceneConfig, NUM_CLASSES};
use bimal_core::trainer::{FlowTrainConfig, OptimConfig, SegTrainConfig, DEFAULT_WIDTHS};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
}

impl OptimSection {
    fn to_optim(&self, seed: u64) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub num_scales: usize,
    pub steps_per_scale: usize,
    pub hidden: usize,
    pub scale_cap: f64,
    pub label_smoothing: f64,
    pub dequant_noise: f64,
    pub eval_every: usize,
    pub monitor_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda_t: f64,
    pub lambda_tau: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub tau_form: TauForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub warmup_frac: f64,
    pub eval_every: usize,
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub flow: FlowSection,
    pub flow_optim: OptimSection,
    pub optim: OptimSection,
    pub loss: LossSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let flow = FlowConfig::default();
        let ft = FlowTrainConfig::default();
        let tau = TauConfig::default();
        let w = LossWeights::default();
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            flow: FlowSection {
                num_scales: flow.num_scales,
                steps_per_scale: flow.steps_per_scale,
                hidden: flow.hidden,
                scale_cap: flow.scale_cap,
                label_smoothing: ft.label_smoothing,
                dequant_noise: ft.dequant_noise,
                eval_every: ft.eval_every,
                monitor_size: ft.monitor_size,
            },
            flow_optim: OptimSection {
                learning_rate: ft.optim.learning_rate,
                momentum: ft.optim.momentum,
                weight_decay: ft.optim.weight_decay,
                batch_size: ft.optim.batch_size,
                max_steps: ft.optim.max_steps,
            },
            optim: {
                let o = SegTrainConfig::default().optim;
                OptimSection {
                    learning_rate: o.learning_rate,
                    momentum: o.momentum,
                    weight_decay: o.weight_decay,
                    batch_size: o.batch_size,
                    max_steps: o.max_steps,
                }
            },
            loss: LossSection {
                lambda_t: w.lambda_t,
                lambda_tau: w.lambda_tau,
                sigma1: tau.sigma1,
                sigma2: tau.sigma2,
                tau_form: tau.form,
            },
            train: TrainSection {
                warmup_frac: SegTrainConfig::default().warmup_frac,
                eval_every: SegTrainConfig::default().eval_every,
                widths: DEFAULT_WIDTHS.to_vec(),
            },
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(p) = parts.next() {
            if parts.peek().is_none() {
                node.insert(p.to_string(), v.clone());
            } else {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("keys come from the default tree");
            }
        }
    }
    Value::Object(root)
}

fn same_kind(a: &Value, b: &Value) -> bool {
    matches!(
        (a, b),
        (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Bool(_), Value::Bool(_))
            | (Value::Array(_), Value::Array(_))
    )
}

/// Layered configuration: defaults, then the optional file, then `--set`
/// overrides, then `--seed`.
pub struct Resolved {
    pub config: RunConfig,
    pub hash: String,
    flat: BTreeMap<String, Value>,
}

impl Resolved {
    pub fn load(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, ConfigError> {
        let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut flat = BTreeMap::new();
        flatten("", &defaults, &mut flat);

        let mut apply = |key: &str, v: Value, origin: &str| -> Result<(), ConfigError> {
            let Some(slot) = flat.get_mut(key) else {
                return err(format!("{origin}: unknown config key {key:?}"));
            };
            if !same_kind(slot, &v) {
                return err(format!("{origin}: {key} expects a value like {slot}, got {v}"));
            }
            *slot = v;
            Ok(())
        };

        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("--config {}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("--config {}: {e}", path.display())))?;
            let Value::Object(m) = v else {
                return err(format!("--config {}: expected a JSON object", path.display()));
            };
            for (k, v) in m {
                apply(&k, v, "--config")?;
            }
        }
        for s in sets {
            let Some((k, raw)) = s.split_once('=') else {
                return err(format!("--set {s:?}: expected KEY=VALUE"));
            };
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            apply(k.trim(), v, "--set")?;
        }
        if let Some(seed) = seed {
            apply("seed", Value::from(seed), "--seed")?;
        }

        let config: RunConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| ConfigError(format!("config: {e}")))?;
        config.validate()?;
        let canonical = serde_json::to_string(&flat).expect("config serializes");
        Ok(Self {
            config,
            hash: sha256_hex(canonical.as_bytes()),
            flat,
        })
    }

    /// The fully resolved flat key map, with its hash.
    pub fn to_json(&self) -> String {
        let mut m: Map<String, Value> = self.flat.clone().into_iter().collect();
        m.insert("config_hash".into(), Value::String(self.hash.clone()));
        serde_json::to_string_pretty(&Value::Object(m)).expect("config serializes")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |r: bimal_core::Result<()>| r.map_err(|e| ConfigError(format!("config: {e}")));
        wrap(self.scene.validate())?;
        wrap(self.flow_config().validate())?;
        wrap(self.flow_train().optim.validate())?;
        wrap(self.seg_train().optim.validate())?;
        wrap(self.seg_train().tau.validate())?;
        if !(0.0..=1.0).contains(&self.train.warmup_frac) {
            return err("train.warmup_frac must lie in [0, 1]");
        }
        if self.train.eval_every == 0 || self.flow.eval_every == 0 {
            return err("eval_every must be >= 1");
        }
        if !(self.loss.lambda_t >= 0.0 && self.loss.lambda_tau >= 0.0) {
            return err("loss weights must be >= 0");
        }
        let w = &self.train.widths;
        if w.len() < 2 || w[0] != 3 || w[w.len() - 1] != NUM_CLASSES {
            return err(format!("train.widths must run from 3 to {NUM_CLASSES}, got {w:?}"));
        }
        Ok(())
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            height: self.scene.height,
            width: self.scene.width,
            channels: NUM_CLASSES,
            num_scales: self.flow.num_scales,
            steps_per_scale: self.flow.steps_per_scale,
            hidden: self.flow.hidden,
            scale_cap: self.flow.scale_cap,
        }
    }

    pub fn flow_train(&self) -> FlowTrainConfig {
        FlowTrainConfig {
            optim: self.flow_optim.to_optim(self.seed),
            label_smoothing: self.flow.label_smoothing,
            dequant_noise: self.flow.dequant_noise,
            eval_every: self.flow.eval_every,
            monitor_size: self.flow.monitor_size,
        }
    }

    pub fn seg_train(&self) -> SegTrainConfig {
        SegTrainConfig {
            optim: self.optim.to_optim(self.seed),
            weights: LossWeights {
                lambda_t: self.loss.lambda_t,
                lambda_tau: self.loss.lambda_tau,
            },
            tau: TauConfig {
                sigma1: self.loss.sigma1,
                sigma2: self.loss.sigma2,
                form: self.loss.tau_form,
            },
            warmup_frac: self.train.warmup_frac,
            eval_every: self.train.eval_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_hash_is_stable() {
        let a = Resolved::load(None, &[], None).unwrap();
        let b = Resolved::load(None, &[], None).unwrap();
        assert_eq!(a.config, RunConfig::default());
        assert_eq!(a.hash, b.hash);
        assert!(a.flat.contains_key("optim.learning_rate"));
        assert!(a.flat.contains_key("scene.horizon"));
    }

    #[test]
    fn overrides_change_hash_and_bad_keys_fail() {
        let base = Resolved::load(None, &[], None).unwrap();
        let r = Resolved::load(None, &["optim.learning_rate=0.5".into()], Some(3)).unwrap();
        assert_eq!(r.config.optim.learning_rate, 0.5);
        assert_eq!(r.config.seed, 3);
        assert_ne!(r.hash, base.hash);
        assert!(Resolved::load(None, &["optim.learnig_rate=0.5".into()], None).is_err());
        assert!(Resolved::load(None, &["optim.batch_size=\"x\"".into()], None).is_err());
        assert!(Resolved::load(None, &["optim.batch_size=1.5".into()], None).is_err());
        assert!(Resolved::load(None, &["optim.momentum=1.0".into()], None).is_err());
        assert!(Resolved::load(None, &["loss.tau_form=\"bogus\"".into()], None).is_err());
        let r = Resolved::load(None, &["loss.tau_form=literal".into()], None).unwrap();
        assert_eq!(r.config.loss.tau_form, TauForm::Literal);
    }
}
