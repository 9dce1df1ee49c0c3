//! Central finite-difference checks of the analytic gradients on random
//! small instances.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::advantage::{compute_advantages, compute_masks, partition, AdvantageKind, AdvantageMode, Group, MaskSet};
use crate::error::Result;
use crate::gradient::{clipped_surrogate, dagrpo_gradient, grpo_gradient, GradientVector, ObjectiveConfig, RatioMode};
use crate::policy::{contexts_along, grad_logprob_sequence, logprob_sequence, PolicyParams, Token};
use crate::rng::{self, purpose, Stream};
use crate::tasks::{OpCode, Operation, Origin, Prompt, Rollout};

pub const STEP: f64 = 1e-5;
/// Ratios closer than this to a clip boundary make the surrogate
/// non-differentiable at FD resolution; such instances are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

/// One random problem: current and behavior parameters, a scored mixed
/// group with advantages, and its masks.
#[derive(Clone, Debug)]
pub struct Instance {
    pub params: PolicyParams,
    pub params_ref: PolicyParams,
    pub group: Group,
    pub masks: MaskSet,
    pub objective: ObjectiveConfig,
}

fn random_row(rng: &mut Stream, v: usize, scale: f64) -> Vec<f64> {
    (0..v).map(|_| scale * (rng.gen::<f64>() * 2.0 - 1.0)).collect()
}

pub fn random_instance(rng: &mut Stream) -> Result<Instance> {
    let modulus = 4u16;
    let v = modulus as usize + 2;
    let order = 2;
    let len = rng.gen_range(1..=3);
    let ops = (0..len)
        .map(|_| Operation {
            op_code: OpCode::ALL[rng.gen_range(0..3)],
            operand: rng.gen_range(0..modulus),
        })
        .collect();
    let prompt = Prompt::new(rng.gen_range(0..modulus), ops, modulus)?;
    let key: Arc<str> = Arc::from(prompt.key());

    let g = rng.gen_range(2..=6);
    let n_off = rng.gen_range(0..g.min(3));
    let mut rollouts = Vec::with_capacity(g);
    for i in 0..g {
        let n = rng.gen_range(1..=7);
        let tokens: Vec<Token> = (0..n).map(|_| Token(rng.gen_range(0..v as u16))).collect();
        let origin = if i >= g - n_off { Origin::OffPolicy } else { Origin::OnPolicy };
        let mut r = Rollout::new(&prompt, tokens, origin);
        r.reward = Some(rng.gen_range(0..=1));
        r.judge_score = Some(1.0 + 0.5 * rng.gen_range(0..=18) as f64);
        rollouts.push(r);
    }

    let mut params = PolicyParams::new(v, order);
    let mut params_old = PolicyParams::new(v, order);
    let mut params_ref = PolicyParams::new(v, order);
    for r in &rollouts {
        for ctx in contexts_along(&key, &r.tokens, order) {
            if params.row(&ctx).is_none() {
                let row = random_row(rng, v, 1.5);
                let old: Vec<f64> = row.iter().zip(random_row(rng, v, 0.15)).map(|(a, b)| a + b).collect();
                params.set_row(ctx.clone(), row);
                params_old.set_row(ctx.clone(), old);
                params_ref.set_row(ctx, random_row(rng, v, 1.0));
            }
        }
    }
    for r in rollouts.iter_mut().filter(|r| !r.is_off_policy()) {
        r.behavior_logprobs = Some(logprob_sequence(&params_old, &prompt, &r.tokens).per_token);
    }

    let group = compute_advantages(&Group::new(prompt, rollouts), AdvantageMode::new(AdvantageKind::Mixed))?;
    let part = partition(&group)?;
    let masks = compute_masks(&group, &part, [0.0, 1.0, 3.0][rng.gen_range(0..3)])?;
    let objective = ObjectiveConfig {
        clip_epsilon: 0.2,
        kl_beta: [0.0, 0.1][rng.gen_range(0..2)],
        length_normalize: rng.gen(),
        ratio_mode: RatioMode::Exact,
    };
    Ok(Instance { params, params_ref, group, masks, objective })
}

/// Central differences of `f` over every stored coordinate of `params`.
pub fn fd_gradient(params: &PolicyParams, h: f64, f: impl Fn(&PolicyParams) -> f64) -> GradientVector {
    let mut grad = GradientVector::new(params.vocab_size());
    let mut probe = params.clone();
    let contexts: Vec<_> = params.rows().map(|(c, _)| c.clone()).collect();
    for ctx in contexts {
        for j in 0..params.vocab_size() {
            let x = probe.row_mut(&ctx)[j];
            probe.row_mut(&ctx)[j] = x + h;
            let up = f(&probe);
            probe.row_mut(&ctx)[j] = x - h;
            let down = f(&probe);
            probe.row_mut(&ctx)[j] = x;
            grad.row_mut(ctx.clone())[j] = (up - down) / (2.0 * h);
        }
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &GradientVector, b: &GradientVector) -> f64 {
    let mut diff = a.clone();
    diff.add_scaled(b, -1.0);
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff.norm() / scale
    }
}

/// Unit- or exact-ratio policy-gradient surrogate whose gradient at the
/// current parameters is the weighted policy gradient.
fn weighted_surrogate(inst: &Instance, weights: &[f64], params: &PolicyParams, mode: RatioMode) -> f64 {
    let g = inst.group.len() as f64;
    let mut total = 0.0;
    for (r, &w) in inst.group.rollouts.iter().zip(weights) {
        if r.is_empty() || w == 0.0 {
            continue;
        }
        let c = inst.objective.coefficient(w, r.len());
        let lp = logprob_sequence(params, &inst.group.prompt, &r.tokens).per_token;
        total += match (mode, r.behavior_logprobs.as_ref()) {
            (RatioMode::Exact, Some(old)) => lp.iter().zip(old).map(|(n, o)| c * (n - o).exp()).sum::<f64>(),
            _ => c * lp.iter().sum::<f64>(),
        };
    }
    total / g
}

fn near_kink(inst: &Instance) -> bool {
    let eps = inst.objective.clip_epsilon;
    inst.group.rollouts.iter().filter(|r| !r.is_off_policy()).any(|r| {
        let lp = logprob_sequence(&inst.params, &inst.group.prompt, &r.tokens).per_token;
        let old = r.behavior_logprobs.as_ref().expect("on-policy log-probs");
        lp.iter().zip(old).any(|(n, o)| {
            let ratio = (n - o).exp();
            (ratio - (1.0 - eps)).abs() < KINK_MARGIN || (ratio - (1.0 + eps)).abs() < KINK_MARGIN
        })
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub redrawn_near_kink: usize,
    pub policy: f64,
    pub grpo: f64,
    pub dagrpo: f64,
    pub surrogate: f64,
}

impl GradcheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.policy.max(self.grpo).max(self.dagrpo).max(self.surrogate)
    }
}

/// Relative errors of one instance: `(policy, grpo, dagrpo, surrogate)`.
pub fn check_instance(inst: &Instance) -> Result<[f64; 4]> {
    let p = &inst.params;
    let prompt = &inst.group.prompt;
    let first = &inst.group.rollouts[0];
    let policy = relative_error(
        &grad_logprob_sequence(p, prompt, &first.tokens),
        &fd_gradient(p, STEP, |q| logprob_sequence(q, prompt, &first.tokens).total),
    );

    let advantages: Vec<f64> = inst.group.rollouts.iter().map(|r| r.advantage.unwrap_or(0.0)).collect();
    let masked: Vec<f64> = advantages.iter().enumerate().map(|(i, &a)| a * inst.masks.weight(i)).collect();
    let mut grpo: f64 = 0.0;
    let mut dagrpo: f64 = 0.0;
    for mode in [RatioMode::UnitApprox, RatioMode::Exact] {
        let obj = ObjectiveConfig { ratio_mode: mode, ..inst.objective };
        let local = Instance { objective: obj, ..inst.clone() };
        grpo = grpo.max(relative_error(
            &grpo_gradient(&inst.group, p, &obj)?,
            &fd_gradient(p, STEP, |q| weighted_surrogate(&local, &advantages, q, mode)),
        ));
        dagrpo = dagrpo.max(relative_error(
            &dagrpo_gradient(&inst.group, &inst.masks, p, &obj)?,
            &fd_gradient(p, STEP, |q| weighted_surrogate(&local, &masked, q, mode)),
        ));
    }

    let mut surrogate: f64 = 0.0;
    for masks in [None, Some(&inst.masks)] {
        let analytic = clipped_surrogate(&inst.group, masks, p, &inst.params_ref, &inst.objective)?.gradient;
        let fd = fd_gradient(p, STEP, |q| {
            clipped_surrogate(&inst.group, masks, q, &inst.params_ref, &inst.objective)
                .map(|o| o.objective)
                .unwrap_or(f64::NAN)
        });
        surrogate = surrogate.max(relative_error(&analytic, &fd));
    }
    Ok([policy, grpo, dagrpo, surrogate])
}

/// Checks `instances` random instances drawn from `seed`.
pub fn run(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    let mut draw = 0u64;
    while report.instances < instances {
        let inst = random_instance(&mut rng::stream(seed, &[purpose::DIAGNOSTIC, draw]))?;
        draw += 1;
        if near_kink(&inst) {
            report.redrawn_near_kink += 1;
            continue;
        }
        let [a, b, c, d] = check_instance(&inst)?;
        report.policy = report.policy.max(a);
        report.grpo = report.grpo.max(b);
        report.dagrpo = report.dagrpo.max(c);
        report.surrogate = report.surrogate.max(d);
        report.instances += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_is_accurate() {
        let r = run(11, 10).unwrap();
        assert_eq!(r.instances, 10);
        assert!(r.max_relative_error() < 1e-6, "{r:?}");
    }
}
