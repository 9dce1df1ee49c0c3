//! The training loop: sample, verify, judge, mix, advantage, mask,
//! gradient, update; plus evaluation, checkpoints and run orchestration.

mod checkpoint;
mod eval;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, StateSidecar};
pub use eval::{evaluate, EvalConfig, EvalReport, LevelReport};

use crate::advantage::{compute_advantages, compute_masks, mix_groups, partition, Group, MaskSet, MaskedGroup};
use crate::config::{PolicyInit, TrainConfig};
use crate::error::{Error, Result};
use crate::gradient::{clipped_surrogate, conflict_indices, dagrpo_gradient, grpo_gradient, GradientVector, RatioMode};
use crate::judge::{EndpointConfig, ExternalJudge, Judge, JudgeMode};
use crate::metrics::{summarize_step, GroupConflict, JsonlWriter, StepMetrics};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::policy::{sample_rollout, PolicyParams, Token};
use crate::rng::{self, purpose};
use crate::tasks::{demonstrate, verify, PromptSource, Rollout};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: PolicyParams,
    pub optimizer: Optimizer,
    /// Number of completed steps.
    pub step: u64,
    pub seed: u64,
}

pub fn optimizer_config(cfg: &TrainConfig) -> OptimizerConfig {
    OptimizerConfig {
        kind: cfg.optimizer,
        learning_rate: cfg.learning_rate,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    }
}

impl TrainState {
    /// Step 0 with the given initial policy.
    pub fn new(cfg: &TrainConfig, params: PolicyParams) -> Self {
        TrainState {
            params,
            optimizer: Optimizer::new(optimizer_config(cfg)),
            step: 0,
            seed: cfg.seed,
        }
    }
}

/// Upper bound on rows written by the format prior.
const MAX_PRIOR_ROWS: usize = 2_000_000;

/// The initial policy of `cfg` over the prompts of `source`.
pub fn initial_policy(cfg: &TrainConfig, source: &PromptSource) -> Result<PolicyParams> {
    let mut params = PolicyParams::new(cfg.vocab_size(), cfg.context_order);
    if cfg.init == PolicyInit::Uniform {
        return Ok(params);
    }
    let m = cfg.modulus as usize;
    let rows: usize = source
        .pool()
        .iter()
        .map(|p| (0..=2 * p.difficulty).map(|t| m.pow(t.div_ceil(2) as u32)).sum::<usize>())
        .sum();
    if rows > MAX_PRIOR_ROWS {
        return Err(Error::config("init", format!("format prior would write {rows} rows")));
    }
    for prompt in source.pool() {
        let vocab = prompt.vocab();
        let key: std::sync::Arc<str> = std::sync::Arc::from(prompt.key());
        let l = prompt.difficulty;
        // well-formed prefixes, extended one position at a time
        let mut prefixes: Vec<Vec<Token>> = vec![Vec::new()];
        for t in 0..=2 * l {
            let mut row = vec![0.0; cfg.vocab_size()];
            if t == 2 * l {
                row[vocab.eos().index()] = cfg.init_bias;
            } else if t % 2 == 0 {
                for v in 0..cfg.modulus {
                    row[vocab.value(v).index()] = cfg.init_bias;
                }
            } else {
                row[vocab.sep().index()] = cfg.init_bias;
            }
            for prefix in &prefixes {
                params.set_row(params.context(&key, prefix), row.clone());
            }
            if t == 2 * l {
                break;
            }
            prefixes = if t % 2 == 0 {
                prefixes
                    .iter()
                    .flat_map(|p| {
                        (0..cfg.modulus).map(move |v| {
                            let mut q = p.clone();
                            q.push(vocab.value(v));
                            q
                        })
                    })
                    .collect()
            } else {
                prefixes
                    .into_iter()
                    .map(|mut p| {
                        p.push(vocab.sep());
                        p
                    })
                    .collect()
            };
        }
    }
    Ok(params)
}

/// Everything one step produced.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub groups: Vec<MaskedGroup>,
}

pub struct Trainer {
    cfg: TrainConfig,
    judge: Judge,
    source: PromptSource,
    params_ref: PolicyParams,
}

impl Trainer {
    /// Builds the judge from the config; an external judge reads its
    /// endpoint from the environment.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let judge = if cfg.judge_mode == JudgeMode::External && cfg.algorithm.uses_masks() {
            Judge::external(external_judge(&cfg)?, cfg.judge_fallback)
        } else {
            Judge::oracle()
        };
        Self::with_judge(cfg, judge)
    }

    pub fn with_judge(cfg: TrainConfig, judge: Judge) -> Result<Self> {
        cfg.validate()?;
        let source = PromptSource::new(&cfg.task());
        let params_ref = initial_policy(&cfg, &source)?;
        Ok(Trainer {
            source,
            params_ref,
            judge,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn judge(&self) -> &Judge {
        &self.judge
    }

    /// Step 0 from the initial policy, which is also the KL reference.
    pub fn init_state(&self) -> TrainState {
        TrainState::new(&self.cfg, self.params_ref.clone())
    }

    pub fn reference_policy(&self) -> &PolicyParams {
        &self.params_ref
    }

    /// Sampled, verified and mixed groups of step `step` (1-based), before
    /// judging. Each prompt uses its own rng streams.
    pub fn sample_groups(&self, params: &PolicyParams, step: u64) -> Result<Vec<Group>> {
        let cfg = &self.cfg;
        let sampling = cfg.sampling();
        let task = cfg.task();
        let n_anchor = cfg.anchors_per_group();
        let n_on = cfg.group_size - n_anchor;
        (0..cfg.prompts_per_step as u64)
            .into_par_iter()
            .map(|p| {
                let prompt = self.source.draw(&mut rng::stream(cfg.seed, &[purpose::PROMPTS, step, p]));
                let mut sampler = rng::stream(cfg.seed, &[purpose::ROLLOUTS, step, p]);
                let on: Vec<Rollout> = (0..n_on)
                    .map(|_| {
                        let mut r = sample_rollout(params, &prompt, &sampling, &mut sampler);
                        r.reward = Some(verify(&prompt, &r.tokens));
                        r
                    })
                    .collect();
                let anchors: Vec<Rollout> = (0..n_anchor as u64)
                    .map(|j| {
                        let mut a = demonstrate(&prompt, &task, &mut rng::stream(cfg.seed, &[purpose::ANCHORS, step, p, j]));
                        a.reward = Some(verify(&prompt, &a.tokens));
                        a
                    })
                    .collect();
                mix_groups(Group::new(prompt, on), anchors)
            })
            .collect()
    }

    /// Judging (masking algorithms only), advantages, partition and masks.
    pub fn prepare_groups(&self, groups: Vec<Group>) -> Result<Vec<MaskedGroup>> {
        let cfg = &self.cfg;
        let groups = if cfg.algorithm.uses_masks() {
            self.judge.score_groups(&groups)?
        } else {
            groups
        };
        let mode = cfg.advantage_mode();
        groups
            .into_par_iter()
            .map(|g| {
                let group = compute_advantages(&g, mode)?;
                let part = partition(&group)?;
                let masks = if cfg.algorithm.uses_masks() && !cfg.force_unit_masks {
                    compute_masks(&group, &part, cfg.delta)?
                } else {
                    MaskSet::all_ones(&part)
                };
                Ok(MaskedGroup { group, partition: part, masks })
            })
            .collect()
    }

    /// The algorithm's gradient for one group.
    pub fn group_gradient(&self, mg: &MaskedGroup, params: &PolicyParams) -> Result<GradientVector> {
        let obj = self.cfg.objective();
        let masked = self.cfg.algorithm.uses_masks();
        match obj.ratio_mode {
            RatioMode::UnitApprox if masked => dagrpo_gradient(&mg.group, &mg.masks, params, &obj),
            RatioMode::UnitApprox => grpo_gradient(&mg.group, params, &obj),
            RatioMode::Exact => {
                clipped_surrogate(&mg.group, masked.then_some(&mg.masks), params, &self.params_ref, &obj).map(|o| o.gradient)
            }
        }
    }

    /// Conflict indices of the members that contribute to the gradient.
    fn group_conflicts(&self, groups: &[MaskedGroup], params: &PolicyParams) -> Result<Vec<GroupConflict>> {
        let obj = self.cfg.objective();
        groups
            .par_iter()
            .map(|mg| conflict_indices(&mg.effective(), params, &obj))
            .collect()
    }

    pub fn train_step(&self, state: &mut TrainState) -> Result<StepOutcome> {
        let started = Instant::now();
        let step = state.step + 1;
        let groups = self.sample_groups(&state.params, step)?;
        let groups = self.prepare_groups(groups)?;
        let conflicts = self.group_conflicts(&groups, &state.params)?;
        // entropy is measured under the sampling policy, before any update
        let mut metrics = summarize_step(step, &groups, &[], &conflicts, &state.params)?;

        let epochs = match self.cfg.ratio_mode {
            RatioMode::Exact => self.cfg.inner_epochs,
            RatioMode::UnitApprox => 1,
        };
        let mut norms = Vec::new();
        for chunk in groups.chunks(self.cfg.update_batch_size) {
            for _ in 0..epochs {
                let grads: Vec<GradientVector> = chunk
                    .par_iter()
                    .map(|mg| self.group_gradient(mg, &state.params))
                    .collect::<Result<_>>()?;
                let mut total = GradientVector::new(state.params.vocab_size());
                let w = 1.0 / chunk.len() as f64;
                for g in &grads {
                    total.add_scaled(g, w);
                }
                if let Some((ctx, j)) = total.first_non_finite() {
                    return Err(Error::NonFiniteGradient(format!(
                        "step {step}: entry {}[{j}] = {}",
                        ctx.encode(),
                        total.get(&ctx, j)
                    )));
                }
                norms.push(total.norm());
                state.optimizer.step(&mut state.params, &total)?;
            }
        }
        metrics.grad_norm = if norms.is_empty() { 0.0 } else { norms.iter().fold(0.0, |s, n| s + n) / norms.len() as f64 };
        state.step = step;
        metrics.wall_time = started.elapsed().as_secs_f64();
        Ok(StepOutcome { metrics, groups })
    }
}

pub fn external_judge(cfg: &TrainConfig) -> Result<ExternalJudge> {
    let mut endpoint = EndpointConfig::from_env(
        &cfg.judge_model,
        Duration::from_secs_f64(cfg.judge_timeout_secs),
        cfg.judge_retries,
        cfg.judge_max_in_flight,
    )?;
    endpoint.cache_path = cfg.judge_cache.as_ref().map(PathBuf::from);
    ExternalJudge::new(endpoint)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub levels: Vec<LevelReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub final_eval: EvalRecord,
    pub final_checkpoint: String,
    pub judge_fallbacks: usize,
}

#[derive(Serialize)]
struct TimingRecord {
    step: u64,
    wall_time: f64,
}

#[derive(Serialize)]
struct GroupDump<'a> {
    step: u64,
    index: usize,
    #[serde(flatten)]
    group: &'a MaskedGroup,
}

/// Output file names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const METRICS: &str = "metrics.jsonl";
    pub const TIMING: &str = "timing.jsonl";
    pub const EVAL: &str = "eval.jsonl";
    pub const GROUPS: &str = "groups.jsonl";
    pub const SUMMARY: &str = "summary.json";
    pub const CHECKPOINTS: &str = "checkpoints";
    pub const FINAL_POLICY: &str = "final.policy";
}

fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(files::CHECKPOINTS).join(format!("step_{step:06}.policy"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Runs `cfg.steps` steps into `out`, resuming from `cfg.resume_from`
/// when set.
pub fn run_experiment(cfg: &TrainConfig, out: &Path) -> Result<RunSummary> {
    run_with_trainer(&Trainer::new(cfg.clone())?, out)
}

pub fn run_with_trainer(trainer: &Trainer, out: &Path) -> Result<RunSummary> {
    let cfg = trainer.config();
    std::fs::create_dir_all(out.join(files::CHECKPOINTS)).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(files::CONFIG), cfg)?;

    let mut state = match &cfg.resume_from {
        Some(path) => {
            let s = load_checkpoint(Path::new(path), optimizer_config(cfg))?;
            if s.seed != cfg.seed {
                return Err(Error::config("resume_from", format!("checkpoint seed {} differs from run seed {}", s.seed, cfg.seed)));
            }
            s
        }
        None => trainer.init_state(),
    };
    let resumed = cfg.resume_from.is_some();
    let open = |name: &str| -> Result<JsonlWriter> {
        let path = out.join(name);
        if resumed {
            JsonlWriter::resume(&path, state.step)
        } else {
            JsonlWriter::create(&path)
        }
    };
    let mut metrics = open(files::METRICS)?;
    let mut timing = open(files::TIMING)?;
    let mut evals = open(files::EVAL)?;
    let mut dumps = open(files::GROUPS)?;

    let eval_cfg = EvalConfig::from_train(cfg);
    let run_eval = |params: &PolicyParams, step: u64| -> Result<EvalRecord> {
        Ok(EvalRecord { step, levels: evaluate(params, &eval_cfg)?.levels })
    };
    let mut last_eval = None;
    if !resumed {
        let record = run_eval(&state.params, 0)?;
        evals.append(&record)?;
        last_eval = Some(record);
    }

    while state.step < cfg.steps {
        let outcome = trainer.train_step(&mut state)?;
        let step = state.step;
        metrics.append(&outcome.metrics)?;
        timing.append(&TimingRecord { step, wall_time: outcome.metrics.wall_time })?;
        log::info!(
            "step {step}: reward {:.4} grad_norm {:.3e} entropy {:.4}",
            outcome.metrics.reward_mean,
            outcome.metrics.grad_norm,
            outcome.metrics.entropy_mean
        );
        if cfg.dump_groups_every > 0 && (step == 1 || step % cfg.dump_groups_every == 0) {
            for (index, group) in outcome.groups.iter().enumerate() {
                dumps.append(&GroupDump { step, index, group })?;
            }
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save_checkpoint(&state, &checkpoint_path(out, step))?;
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let record = run_eval(&state.params, step)?;
            evals.append(&record)?;
            last_eval = Some(record);
        }
    }

    let final_eval = match last_eval {
        Some(r) if r.step == state.step => r,
        _ => {
            let record = run_eval(&state.params, state.step)?;
            evals.append(&record)?;
            record
        }
    };
    let final_path = out.join(files::FINAL_POLICY);
    save_checkpoint(&state, &final_path)?;
    let summary = RunSummary {
        steps: state.step,
        final_eval,
        final_checkpoint: final_path.display().to_string(),
        judge_fallbacks: trainer.judge().fallback_count(),
    };
    write_json(&out.join(files::SUMMARY), &summary)?;
    Ok(summary)
}
