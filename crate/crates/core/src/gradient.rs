//! Policy-gradient assembly and gradient-conflict analysis.
//!
//! Every objective here is a weighted sum of per-token score functions
//! `g_{i,t} = ∇_θ log π_θ(o_{i,t} | h_{i,t})`:
//!
//! * GRPO / Dr.GRPO: `(1/G) Σ_i (A_i/|o_i|) Σ_t r_{i,t} g_{i,t}`, dropping
//!   `1/|o_i|` when length normalization is off.
//! * Rectified / DaGRPO: the same sum with `A_i` replaced by `λ_i A_i` and
//!   the `1/|G_mix|` prefactor kept as is.
//! * The clipped surrogate with an exact KL penalty against a reference
//!   policy.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::advantage::{partition, Group, MaskSet};
use crate::error::{Error, Result};
use crate::policy::{self, add_grad_logprob, contexts_along, Context, PolicyParams, Token};

/// Sparse gradient over `(context, vocab index)` coordinates, stored by row.
/// A missing row means exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    vocab_size: usize,
    rows: BTreeMap<Context, Vec<f64>>,
}

impl GradientVector {
    pub fn new(vocab_size: usize) -> Self {
        GradientVector {
            vocab_size,
            rows: BTreeMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, ctx: &Context) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    pub fn row_mut(&mut self, ctx: Context) -> &mut Vec<f64> {
        let v = self.vocab_size;
        self.rows.entry(ctx).or_insert_with(|| vec![0.0; v])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.rows.iter().map(|(c, r)| (c, r.as_slice()))
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Value at a coordinate; absent coordinates are zero.
    pub fn get(&self, ctx: &Context, index: usize) -> f64 {
        self.rows.get(ctx).map_or(0.0, |r| r[index])
    }

    pub fn contains(&self, ctx: &Context) -> bool {
        self.rows.contains_key(ctx)
    }

    pub fn scale(&mut self, s: f64) {
        for row in self.rows.values_mut() {
            row.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn add_scaled(&mut self, other: &GradientVector, s: f64) {
        for (ctx, row) in &other.rows {
            let dst = self.row_mut(ctx.clone());
            for (d, x) in dst.iter_mut().zip(row) {
                *d += s * x;
            }
        }
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.rows
            .iter()
            .filter_map(|(c, a)| other.rows.get(c).map(|b| (a, b)))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0, |s, x| s + x * x)
            .sqrt()
    }

    /// Cosine similarity clamped to `[-1, 1]`; zero when either side is zero.
    pub fn cosine(&self, other: &GradientVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            (self.dot(other) / denom).clamp(-1.0, 1.0)
        }
    }

    /// First non-finite coordinate, if any.
    pub fn first_non_finite(&self) -> Option<(Context, usize)> {
        self.rows.iter().find_map(|(c, r)| {
            r.iter()
                .position(|x| !x.is_finite())
                .map(|j| (c.clone(), j))
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((ctx, j)) => Err(Error::NonFiniteGradient(format!("{}[{j}]", ctx.encode()))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// `r = π_θ / π_old` from stored behavior log-probabilities.
    Exact,
    /// `r ≈ 1`.
    UnitApprox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub length_normalize: bool,
    pub ratio_mode: RatioMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            clip_epsilon: 0.2,
            kl_beta: 0.0,
            length_normalize: true,
            ratio_mode: RatioMode::UnitApprox,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::config("clip_epsilon", "must be positive"));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(Error::config("kl_beta", "must be non-negative"));
        }
        Ok(())
    }

    /// Per-rollout scale: `A/|o|`, or `A` without length normalization.
    pub fn coefficient(&self, advantage: f64, len: usize) -> f64 {
        if self.length_normalize {
            advantage / len as f64
        } else {
            advantage
        }
    }
}

/// Importance ratios of each token of member `index` under `params`.
fn token_ratios(group: &Group, index: usize, params: &PolicyParams, key: &Arc<str>, mode: RatioMode) -> Result<Vec<f64>> {
    let r = &group.rollouts[index];
    if mode == RatioMode::UnitApprox || r.is_off_policy() {
        return Ok(vec![1.0; r.len()]);
    }
    let old = r
        .behavior_logprobs
        .as_ref()
        .ok_or(Error::MissingField { index, field: "behavior_logprobs" })?;
    let new = policy::logprob_tokens(params, key, &r.tokens);
    Ok(new.per_token.iter().zip(old).map(|(n, o)| (n - o).exp()).collect())
}

/// `(1/G) Σ_i (w_i/|o_i|) Σ_t r_{i,t} g_{i,t}` for per-member weights `w`.
/// Members with zero weight are skipped entirely.
fn weighted_gradient(group: &Group, weights: &[f64], params: &PolicyParams, cfg: &ObjectiveConfig) -> Result<GradientVector> {
    let key: Arc<str> = Arc::from(group.prompt.key());
    let mut grad = GradientVector::new(params.vocab_size());
    for (i, (r, &w)) in group.rollouts.iter().zip(weights).enumerate() {
        if w == 0.0 || r.is_empty() {
            continue;
        }
        let c = cfg.coefficient(w, r.len());
        let ratios = token_ratios(group, i, params, &key, cfg.ratio_mode)?;
        add_grad_logprob(&mut grad, params, &key, &r.tokens, |t| c * ratios[t]);
    }
    grad.scale(1.0 / group.len() as f64);
    Ok(grad)
}

/// GRPO policy gradient (Dr.GRPO when `length_normalize` is off).
pub fn grpo_gradient(group: &Group, params: &PolicyParams, cfg: &ObjectiveConfig) -> Result<GradientVector> {
    let advantages = group.advantages()?;
    weighted_gradient(group, &advantages, params, cfg)
}

/// Positive and negative components `v⁺`, `v⁻` of the GRPO gradient,
/// each computed on its own.
pub fn gradient_components(group: &Group, params: &PolicyParams, cfg: &ObjectiveConfig) -> Result<(GradientVector, GradientVector)> {
    let advantages = group.advantages()?;
    let pos: Vec<f64> = advantages.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
    let neg: Vec<f64> = advantages.iter().map(|&a| if a < 0.0 { a } else { 0.0 }).collect();
    Ok((
        weighted_gradient(group, &pos, params, cfg)?,
        weighted_gradient(group, &neg, params, cfg)?,
    ))
}

fn masked_advantages(group: &Group, masks: &MaskSet) -> Result<Vec<f64>> {
    let part = partition(group)?;
    masks.check_against(&part)?;
    let advantages = group.advantages()?;
    Ok(advantages
        .iter()
        .enumerate()
        .map(|(i, &a)| if masks.weight(i) != 0.0 { a } else { 0.0 })
        .collect())
}

/// Masked gradient over a (possibly mixed) group. Off-policy members always
/// use a unit ratio.
pub fn dagrpo_gradient(group: &Group, masks: &MaskSet, params: &PolicyParams, cfg: &ObjectiveConfig) -> Result<GradientVector> {
    let weights = masked_advantages(group, masks)?;
    weighted_gradient(group, &weights, params, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateOutput {
    pub objective: f64,
    pub gradient: GradientVector,
    /// Fraction of on-policy tokens whose clipped branch was active.
    pub clipped_fraction: f64,
}

/// `KL(p‖q)` and its gradient with respect to the logits of `p`.
fn kl_with_grad(p: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum();
    let grad = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi.ln() - qi.ln() - kl) } else { 0.0 })
        .collect();
    (kl, grad)
}

/// Clipped surrogate with KL penalty, evaluated at `params` against the
/// behavior log-probabilities stored on each on-policy rollout.
///
/// Per token: `min(r·A, clip(r, 1−ε, 1+ε)·A) − β·KL(π_θ(·|h) ‖ π_ref(·|h))`,
/// averaged with the same `1/G` and `1/|o_i|` weights as the policy
/// gradient. When `masks` is given, `A` becomes `λ·A`. Off-policy members
/// are never clipped and contribute `A·log π_θ(o_t|h_t)`, whose gradient
/// is the unit-ratio term `A·g`.
pub fn clipped_surrogate(
    group: &Group,
    masks: Option<&MaskSet>,
    params: &PolicyParams,
    params_ref: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<SurrogateOutput> {
    let advantages = match masks {
        Some(m) => masked_advantages(group, m)?,
        None => group.advantages()?,
    };
    let key: Arc<str> = Arc::from(group.prompt.key());
    let g = group.len() as f64;
    let (lo, hi) = (1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    let unmodified = policy::SamplingConfig::unmodified(usize::MAX);

    let mut grad = GradientVector::new(params.vocab_size());
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut on_tokens = 0usize;

    for (i, r) in group.rollouts.iter().enumerate() {
        if r.is_empty() {
            continue;
        }
        let a = advantages[i];
        let norm = cfg.coefficient(1.0, r.len()) / g;
        let ratios = if r.is_off_policy() {
            vec![1.0; r.len()]
        } else {
            token_ratios(group, i, params, &key, RatioMode::Exact)?
        };
        let off_logprobs = if r.is_off_policy() && a != 0.0 {
            policy::logprob_tokens(params, &key, &r.tokens).per_token
        } else {
            Vec::new()
        };

        // surrogate term
        let mut weights = vec![0.0; r.len()];
        for (t, &ratio) in ratios.iter().enumerate() {
            let unclipped = ratio * a;
            let clipped_val = ratio.clamp(lo, hi) * a;
            if r.is_off_policy() {
                if a != 0.0 {
                    objective += norm * a * off_logprobs[t];
                    weights[t] = norm * a;
                }
            } else if unclipped <= clipped_val {
                objective += norm * unclipped;
                weights[t] = norm * a * ratio;
            } else {
                objective += norm * clipped_val;
                clipped += 1;
            }
            if !r.is_off_policy() {
                on_tokens += 1;
            }
        }
        add_grad_logprob(&mut grad, params, &key, &r.tokens, |t| weights[t]);

        // KL penalty
        if cfg.kl_beta > 0.0 {
            for ctx in contexts_along(&key, &r.tokens, params.order()) {
                let p = policy::token_distribution(params, &ctx, &unmodified);
                let q = policy::token_distribution(params_ref, &ctx, &unmodified);
                let (kl, dkl) = kl_with_grad(&p, &q);
                objective -= cfg.kl_beta * norm * kl;
                let row = grad.row_mut(ctx);
                for (d, x) in row.iter_mut().zip(dkl) {
                    *d -= cfg.kl_beta * norm * x;
                }
            }
        }
    }

    Ok(SurrogateOutput {
        objective,
        gradient: grad,
        clipped_fraction: if on_tokens == 0 { 0.0 } else { clipped as f64 / on_tokens as f64 },
    })
}

/// The KL term of [`clipped_surrogate`] before scaling by `β`.
pub fn kl_divergence_mean(group: &Group, params: &PolicyParams, params_ref: &PolicyParams, cfg: &ObjectiveConfig) -> f64 {
    let key: Arc<str> = Arc::from(group.prompt.key());
    let unmodified = policy::SamplingConfig::unmodified(usize::MAX);
    let g = group.len() as f64;
    group
        .rollouts
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let norm = cfg.coefficient(1.0, r.len()) / g;
            contexts_along(&key, &r.tokens, params.order())
                .iter()
                .map(|ctx| {
                    let p = policy::token_distribution(params, ctx, &unmodified);
                    let q = policy::token_distribution(params_ref, ctx, &unmodified);
                    norm * kl_with_grad(&p, &q).0
                })
                .sum::<f64>()
        })
        .sum()
}

/// A `(history, token)` pair emitted by both a positive and a negative member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedPair {
    pub context: String,
    pub token: Token,
    /// Sum of `A_i/|o_i|` (or `A_i`) over every occurrence.
    pub net_coefficient: f64,
    pub positive_count: usize,
    pub negative_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub shared_pairs: Vec<SharedPair>,
    /// Fraction of touched coordinates that receive both a strictly positive
    /// and a strictly negative per-rollout contribution.
    pub interference_index: f64,
    pub pairwise_cosine: Vec<Vec<f64>>,
    /// `Σ_c (Σ_i |x_ic| − |Σ_i x_ic|) / Σ_c Σ_i |x_ic|`.
    pub cancellation_mass: f64,
}

impl ConflictReport {
    pub fn empty() -> Self {
        ConflictReport {
            shared_pairs: Vec::new(),
            interference_index: 0.0,
            pairwise_cosine: Vec::new(),
            cancellation_mass: 0.0,
        }
    }
}

#[derive(Clone, Copy, Default)]
struct CoordStats {
    pos: bool,
    neg: bool,
    sum: f64,
    abs: f64,
}

/// Per-rollout gradient vectors `(A_i/|o_i|) Σ_t g_{i,t}` (unit ratio).
pub fn per_rollout_gradients(group: &Group, params: &PolicyParams, cfg: &ObjectiveConfig) -> Result<Vec<GradientVector>> {
    let key: Arc<str> = Arc::from(group.prompt.key());
    let advantages = group.advantages()?;
    Ok(group
        .rollouts
        .iter()
        .zip(&advantages)
        .map(|(r, &a)| {
            let mut v = GradientVector::new(params.vocab_size());
            if a != 0.0 && !r.is_empty() {
                let c = cfg.coefficient(a, r.len());
                add_grad_logprob(&mut v, params, &key, &r.tokens, |_| c);
            }
            v
        })
        .collect())
}

/// Where positive and negative members pull the same parameters in
/// opposite directions.
pub fn conflict_report(group: &Group, params: &PolicyParams, cfg: &ObjectiveConfig) -> Result<ConflictReport> {
    let advantages = group.advantages()?;
    let key: Arc<str> = Arc::from(group.prompt.key());

    // (context, token) occurrences by sign
    let mut pairs: BTreeMap<(Context, Token), (f64, usize, usize)> = BTreeMap::new();
    for (r, &a) in group.rollouts.iter().zip(&advantages) {
        if a == 0.0 || r.is_empty() {
            continue;
        }
        let c = cfg.coefficient(a, r.len());
        for (ctx, &tok) in contexts_along(&key, &r.tokens, params.order()).into_iter().zip(&r.tokens) {
            let e = pairs.entry((ctx, tok)).or_insert((0.0, 0, 0));
            e.0 += c;
            if a > 0.0 {
                e.1 += 1;
            } else {
                e.2 += 1;
            }
        }
    }
    let shared_pairs = pairs
        .into_iter()
        .filter(|(_, (_, p, n))| *p > 0 && *n > 0)
        .map(|((ctx, token), (net, p, n))| SharedPair {
            context: ctx.encode(),
            token,
            net_coefficient: net,
            positive_count: p,
            negative_count: n,
        })
        .collect();

    let vectors = per_rollout_gradients(group, params, cfg)?;
    let mut coords: BTreeMap<&Context, Vec<CoordStats>> = BTreeMap::new();
    for v in &vectors {
        for (ctx, row) in v.rows() {
            let stats = coords
                .entry(ctx)
                .or_insert_with(|| vec![CoordStats::default(); row.len()]);
            for (s, &x) in stats.iter_mut().zip(row) {
                s.pos |= x > 0.0;
                s.neg |= x < 0.0;
                s.sum += x;
                s.abs += x.abs();
            }
        }
    }
    let (mut touched, mut conflicting, mut abs_total, mut abs_net) = (0usize, 0usize, 0.0, 0.0);
    for s in coords.values().flatten() {
        if s.pos || s.neg {
            touched += 1;
        }
        if s.pos && s.neg {
            conflicting += 1;
        }
        abs_total += s.abs;
        abs_net += s.sum.abs();
    }

    let n = vectors.len();
    let mut pairwise_cosine = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = vectors[i].cosine(&vectors[j]);
            pairwise_cosine[i][j] = c;
            pairwise_cosine[j][i] = c;
        }
    }

    Ok(ConflictReport {
        shared_pairs,
        interference_index: if touched == 0 { 0.0 } else { conflicting as f64 / touched as f64 },
        pairwise_cosine,
        cancellation_mass: if abs_total == 0.0 {
            0.0
        } else {
            ((abs_total - abs_net) / abs_total).clamp(0.0, 1.0)
        },
    })
}

/// Only the scalar indices of [`conflict_report`], without the shared-pair
/// table or cosine matrix.
pub fn conflict_indices(group: &Group, params: &PolicyParams, cfg: &ObjectiveConfig) -> Result<(f64, f64)> {
    let r = conflict_report(group, params, cfg)?;
    Ok((r.interference_index, r.cancellation_mass))
}
