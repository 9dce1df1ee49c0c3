//! Flat training configuration.
//!
//! Every field is a top-level key of a JSON object so that config files and
//! `--set key=value` overrides address the same names. Missing keys take
//! their defaults; unknown keys are rejected by name.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::advantage::{AdvantageKind, AdvantageMode};
use crate::error::{Error, Result};
use crate::gradient::{ObjectiveConfig, RatioMode};
use crate::judge::{JudgeFallback, JudgeMode};
use crate::optim::OptimizerKind;
use crate::policy::SamplingConfig;
use crate::tasks::TaskConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Grpo,
    DrGrpo,
    Dagrpo,
    DagrpoNoOffpolicy,
}

impl Algorithm {
    pub fn uses_masks(self) -> bool {
        matches!(self, Algorithm::Dagrpo | Algorithm::DagrpoNoOffpolicy)
    }

    pub fn advantage_kind(self) -> AdvantageKind {
        match self {
            Algorithm::Grpo => AdvantageKind::GrpoStandard,
            Algorithm::DrGrpo => AdvantageKind::DrGrpo,
            Algorithm::Dagrpo | Algorithm::DagrpoNoOffpolicy => AdvantageKind::Mixed,
        }
    }
}

/// Initial policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyInit {
    /// All-zero logits.
    Uniform,
    /// Every pool prompt starts with a bias of `init_bias` towards the
    /// value/SEP layout of a well-formed answer of its chain length; values
    /// themselves stay uniform.
    FormatPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub group_size: usize,
    /// Off-policy anchors per group; only used by `dagrpo`.
    pub n_off: usize,
    pub delta: f64,
    pub steps: u64,
    pub prompts_per_step: usize,
    /// Prompts per optimizer update; a step performs
    /// `ceil(prompts_per_step / update_batch_size)` updates.
    pub update_batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
    pub context_order: usize,
    pub init: PolicyInit,
    pub init_bias: f64,

    pub clip_epsilon: f64,
    pub kl_beta: f64,
    /// `null` picks the algorithm's default (off for `dr_grpo`).
    pub length_normalize: Option<bool>,
    pub ratio_mode: RatioMode,
    /// Optimizer passes over each rollout batch in exact-ratio mode.
    pub inner_epochs: usize,
    pub epsilon_std: f64,
    /// Replace computed masks by all-ones (reduction checks).
    pub force_unit_masks: bool,

    pub judge_mode: JudgeMode,
    pub judge_fallback: JudgeFallback,
    pub judge_model: String,
    pub judge_timeout_secs: f64,
    pub judge_retries: u32,
    pub judge_max_in_flight: usize,
    pub judge_cache: Option<String>,

    pub modulus: u16,
    pub chain_lengths: Vec<usize>,
    pub noise_rate: f64,
    pub pool_size: usize,
    pub pool_seed: u64,

    pub eval_temperature: f64,
    pub eval_top_p: f64,
    pub eval_prompts_per_level: usize,
    pub eval_k: usize,
    pub eval_every: u64,

    pub checkpoint_every: u64,
    pub dump_groups_every: u64,
    pub resume_from: Option<String>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Dagrpo,
            group_size: 8,
            n_off: 1,
            delta: 3.0,
            steps: 500,
            prompts_per_step: 128,
            update_batch_size: 64,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            temperature: 1.0,
            top_p: 1.0,
            max_len: 16,
            context_order: 2,
            init: PolicyInit::Uniform,
            init_bias: 4.0,
            clip_epsilon: 0.2,
            kl_beta: 0.0,
            length_normalize: None,
            ratio_mode: RatioMode::UnitApprox,
            inner_epochs: 1,
            epsilon_std: 1e-6,
            force_unit_masks: false,
            judge_mode: JudgeMode::Oracle,
            judge_fallback: JudgeFallback::Oracle,
            judge_model: "gpt-4o".to_string(),
            judge_timeout_secs: 30.0,
            judge_retries: 2,
            judge_max_in_flight: 8,
            judge_cache: None,
            modulus: 16,
            chain_lengths: vec![1],
            noise_rate: 0.0,
            pool_size: 0,
            pool_seed: 0,
            eval_temperature: 0.6,
            eval_top_p: 1.0,
            eval_prompts_per_level: 256,
            eval_k: 8,
            eval_every: 50,
            checkpoint_every: 100,
            dump_groups_every: 100,
            resume_from: None,
            seed: 0,
        }
    }
}

/// Human-readable description of every key, used by `--help`.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("algorithm", "grpo | dr_grpo | dagrpo | dagrpo_no_offpolicy"),
    ("group_size", "rollouts per group G, anchors included"),
    ("n_off", "off-policy anchors per group (dagrpo only)"),
    ("delta", "distinctiveness margin on judge scores"),
    ("steps", "training steps"),
    ("prompts_per_step", "prompts sampled per step"),
    ("update_batch_size", "prompts per optimizer update"),
    ("learning_rate", "optimizer step size"),
    ("optimizer", "sgd | adam"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("temperature", "training sampling temperature"),
    ("top_p", "training nucleus mass"),
    ("max_len", "token budget per response"),
    ("context_order", "history length k of the policy contexts"),
    ("init", "uniform | format_prior (needs a prompt pool)"),
    ("init_bias", "logit bonus of the format prior"),
    ("clip_epsilon", "ratio clip range (exact ratio mode)"),
    ("kl_beta", "KL penalty weight (exact ratio mode)"),
    ("length_normalize", "true | false | null (algorithm default)"),
    ("ratio_mode", "unit_approx | exact"),
    ("inner_epochs", "optimizer passes per batch in exact mode"),
    ("epsilon_std", "std floor below which advantages are zero"),
    ("force_unit_masks", "keep every partitioned rollout"),
    ("judge_mode", "oracle | external"),
    ("judge_fallback", "oracle | abort, on external judge failure"),
    ("judge_model", "model name sent to the external judge"),
    ("judge_timeout_secs", "per-request timeout"),
    ("judge_retries", "retries after a failed judge request"),
    ("judge_max_in_flight", "concurrent judge requests"),
    ("judge_cache", "path of the judge score cache file"),
    ("modulus", "task modulus M (vocabulary is M + 2)"),
    ("chain_lengths", "comma-separated chain lengths, drawn uniformly"),
    ("noise_rate", "probability the demonstrator corrupts a trace"),
    ("pool_size", "fixed prompt pool size, 0 for the full prompt space"),
    ("pool_seed", "seed of the prompt pool"),
    ("eval_temperature", "evaluation sampling temperature"),
    ("eval_top_p", "evaluation nucleus mass"),
    ("eval_prompts_per_level", "evaluation prompts per chain length"),
    ("eval_k", "samples per prompt for avg@k"),
    ("eval_every", "evaluation interval in steps (0 = start and end only)"),
    ("checkpoint_every", "checkpoint interval in steps (0 = final only)"),
    ("dump_groups_every", "group dump interval in steps (0 = never)"),
    ("resume_from", "policy checkpoint to resume from"),
    ("seed", "run seed"),
];

impl TrainConfig {
    /// Defaults, then `file`, then `overrides`, in that order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = match serde_json::to_value(TrainConfig::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let value: Value = serde_json::from_str(&text).map_err(|e| Error::File {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            let Value::Object(entries) = value else {
                return Err(Error::File {
                    path: path.to_path_buf(),
                    reason: "config must be a JSON object".into(),
                });
            };
            for (k, v) in entries {
                if !map.contains_key(&k) {
                    return Err(Error::config(k, "unknown config key"));
                }
                map.insert(k, v);
            }
        }
        for (k, raw) in overrides {
            let current = map
                .get(k)
                .ok_or_else(|| Error::config(k.clone(), "unknown config key"))?;
            let value = parse_override(current, raw);
            map.insert(k.clone(), value);
        }
        let cfg = from_map(map)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group_size", "must be at least 2"));
        }
        if self.n_off >= self.group_size {
            return Err(Error::config("n_off", "must be smaller than group_size"));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::config("delta", "must be non-negative"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a non-negative finite number"));
        }
        if self.prompts_per_step == 0 {
            return Err(Error::config("prompts_per_step", "must be positive"));
        }
        if self.update_batch_size == 0 {
            return Err(Error::config("update_batch_size", "must be positive"));
        }
        if self.inner_epochs == 0 {
            return Err(Error::config("inner_epochs", "must be positive"));
        }
        if self.eval_k == 0 {
            return Err(Error::config("eval_k", "must be positive"));
        }
        if !(self.epsilon_std > 0.0) {
            return Err(Error::config("epsilon_std", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam_beta", "decay rates must lie in [0, 1)"));
        }
        self.sampling().validate()?;
        self.eval_sampling().validate()?;
        self.objective().validate()?;
        self.task().validate()?;
        if self.init == PolicyInit::FormatPrior {
            if self.pool_size == 0 {
                return Err(Error::config("init", "format_prior needs pool_size > 0"));
            }
            let longest = self.chain_lengths.iter().copied().max().unwrap_or(1);
            if self.context_order < 2 * longest {
                return Err(Error::config("context_order", format!("format_prior needs at least {}", 2 * longest)));
            }
            if !self.init_bias.is_finite() {
                return Err(Error::config("init_bias", "must be finite"));
            }
        }
        if let Some(&l) = self.chain_lengths.iter().max() {
            if self.max_len < 2 * l + 1 {
                return Err(Error::config("max_len", format!("must be at least {} to fit chain length {l}", 2 * l + 1)));
            }
        }
        Ok(())
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            max_len: self.max_len,
        }
    }

    pub fn eval_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            temperature: self.eval_temperature,
            top_p: self.eval_top_p,
            max_len: self.max_len,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            clip_epsilon: self.clip_epsilon,
            kl_beta: self.kl_beta,
            length_normalize: self
                .length_normalize
                .unwrap_or(self.algorithm != Algorithm::DrGrpo),
            ratio_mode: self.ratio_mode,
        }
    }

    pub fn advantage_mode(&self) -> AdvantageMode {
        AdvantageMode {
            kind: self.algorithm.advantage_kind(),
            epsilon_std: self.epsilon_std,
        }
    }

    pub fn task(&self) -> TaskConfig {
        TaskConfig {
            modulus: self.modulus,
            chain_lengths: self.chain_lengths.clone(),
            prompts_per_batch: self.prompts_per_step,
            noise_rate: self.noise_rate,
            pool_size: self.pool_size,
            pool_seed: self.pool_seed,
        }
    }

    /// Anchors actually injected per group.
    pub fn anchors_per_group(&self) -> usize {
        if self.algorithm == Algorithm::Dagrpo {
            self.n_off
        } else {
            0
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.modulus as usize + 2
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn parse_override(current: &Value, raw: &str) -> Value {
    if current.is_array() && !raw.trim_start().starts_with('[') {
        return Value::Array(
            raw.split(',')
                .map(|item| serde_json::from_str(item.trim()).unwrap_or_else(|_| Value::String(item.trim().to_string())))
                .collect(),
        );
    }
    if current.is_string() {
        return Value::String(raw.to_string());
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn from_map(map: Map<String, Value>) -> Result<TrainConfig> {
    // Deserialize key by key first so a type error names its key.
    let defaults = serde_json::to_value(TrainConfig::default())?;
    for (k, v) in &map {
        let mut probe = defaults.clone();
        probe[k] = v.clone();
        if let Err(e) = serde_json::from_value::<TrainConfig>(probe) {
            return Err(Error::config(k.clone(), e.to_string()));
        }
    }
    Ok(serde_json::from_value(Value::Object(map))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = TrainConfig::default();
        assert_eq!(c.group_size, 8);
        assert_eq!(c.delta, 3.0);
        assert_eq!(c.steps, 500);
        assert_eq!((c.prompts_per_step, c.update_batch_size), (128, 64));
        assert_eq!((c.temperature, c.top_p), (1.0, 1.0));
        assert_eq!((c.eval_temperature, c.eval_top_p), (0.6, 1.0));
        assert_eq!(c.kl_beta, 0.0);
        assert_eq!(c.clip_epsilon, 0.2);
        c.validate().unwrap();
    }

    #[test]
    fn every_key_is_documented() {
        let Value::Object(map) = serde_json::to_value(TrainConfig::default()).unwrap() else { panic!() };
        let documented: Vec<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
        for k in map.keys() {
            assert!(documented.contains(&k.as_str()), "undocumented key {k}");
        }
        assert_eq!(map.len(), KEY_DOCS.len());
    }

    #[test]
    fn overrides_apply() {
        let c = TrainConfig::resolve(
            None,
            &set(&[("algorithm", "grpo"), ("steps", "3"), ("chain_lengths", "1,2"), ("length_normalize", "false"), ("judge_cache", "x.jsonl")]),
        )
        .unwrap();
        assert_eq!(c.algorithm, Algorithm::Grpo);
        assert_eq!(c.steps, 3);
        assert_eq!(c.chain_lengths, vec![1, 2]);
        assert!(!c.objective().length_normalize);
        assert_eq!(c.judge_cache.as_deref(), Some("x.jsonl"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::resolve(None, &set(&[("stepz", "3")])).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "stepz"));
    }

    #[test]
    fn bad_value_is_named() {
        let err = TrainConfig::resolve(None, &set(&[("group_size", "many")])).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "group_size"));
        let err = TrainConfig::resolve(None, &set(&[("n_off", "8")])).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "n_off"));
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"steps": 7, "seed": 3}"#).unwrap();
        let c = TrainConfig::resolve(Some(&path), &set(&[("seed", "4")])).unwrap();
        assert_eq!((c.steps, c.seed), (7, 4));
        std::fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        let err = TrainConfig::resolve(Some(&path), &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "bogus"));
    }

    #[test]
    fn dr_grpo_turns_off_length_normalization() {
        let c = TrainConfig {
            algorithm: Algorithm::DrGrpo,
            ..TrainConfig::default()
        };
        assert!(!c.objective().length_normalize);
        assert_eq!(c.advantage_mode().kind, AdvantageKind::DrGrpo);
        assert_eq!(c.anchors_per_group(), 0);
    }
}
