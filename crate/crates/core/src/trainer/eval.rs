use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::policy::{sample_rollout, PolicyParams, SamplingConfig};
use crate::rng::{self, purpose};
use crate::tasks::{verify, PromptSource, TaskConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub chain_lengths: Vec<usize>,
    pub prompts_per_level: usize,
    pub k: usize,
    pub sampling: SamplingConfig,
    pub task: TaskConfig,
    pub seed: u64,
}

impl EvalConfig {
    /// Evaluation settings of a training run. Prompts come from the run's
    /// prompt distribution under a stream no training step uses.
    pub fn from_train(cfg: &TrainConfig) -> Self {
        let mut lengths = cfg.chain_lengths.clone();
        lengths.sort_unstable();
        lengths.dedup();
        EvalConfig {
            chain_lengths: lengths,
            prompts_per_level: cfg.eval_prompts_per_level,
            k: cfg.eval_k,
            sampling: cfg.eval_sampling(),
            task: cfg.task(),
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub chain_length: usize,
    pub prompts: usize,
    pub k: usize,
    pub pass_at_1: f64,
    pub avg_at_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub levels: Vec<LevelReport>,
}

impl EvalReport {
    pub fn level(&self, chain_length: usize) -> Option<&LevelReport> {
        self.levels.iter().find(|l| l.chain_length == chain_length)
    }

    /// Mean pass@1 over levels.
    pub fn pass_at_1(&self) -> f64 {
        if self.levels.is_empty() {
            return 0.0;
        }
        self.levels.iter().map(|l| l.pass_at_1).sum::<f64>() / self.levels.len() as f64
    }
}

/// pass@1 (the first of `k` samples) and avg@k per chain length.
pub fn evaluate(params: &PolicyParams, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.k == 0 {
        return Err(Error::config("eval_k", "must be positive"));
    }
    cfg.sampling.validate()?;
    let source = PromptSource::new(&cfg.task);
    let mut levels = Vec::new();
    for &length in &cfg.chain_lengths {
        let outcomes: Vec<(f64, f64)> = (0..cfg.prompts_per_level as u64)
            .into_par_iter()
            .map(|p| {
                let path = [purpose::EVAL, length as u64, p];
                let prompt = source
                    .draw_with_length(length, &mut rng::stream(cfg.seed, &[path[0], path[1], path[2], 0]))
                    .ok_or_else(|| Error::MissingData(format!("no evaluation prompt of chain length {length}")))?;
                let mut sampler = rng::stream(cfg.seed, &[path[0], path[1], path[2], 1]);
                let hits: Vec<u8> = (0..cfg.k)
                    .map(|_| verify(&prompt, &sample_rollout(params, &prompt, &cfg.sampling, &mut sampler).tokens))
                    .collect();
                let avg = hits.iter().map(|&h| h as f64).sum::<f64>() / cfg.k as f64;
                Ok((hits[0] as f64, avg))
            })
            .collect::<Result<_>>()?;
        let n = outcomes.len().max(1) as f64;
        levels.push(LevelReport {
            chain_length: length,
            prompts: outcomes.len(),
            k: cfg.k,
            pass_at_1: outcomes.iter().map(|o| o.0).sum::<f64>() / n,
            avg_at_k: outcomes.iter().map(|o| o.1).sum::<f64>() / n,
        });
    }
    Ok(EvalReport { levels })
}
