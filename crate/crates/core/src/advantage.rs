//! Group-relative advantages, sign partitions, distinctiveness masks and
//! mixed on/off-policy groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{Prompt, Rollout};

/// All rollouts for one prompt. On-policy members come first, off-policy
/// anchors after them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt: Prompt,
    pub rollouts: Vec<Rollout>,
}

impl Group {
    pub fn new(prompt: Prompt, rollouts: Vec<Rollout>) -> Self {
        Group { prompt, rollouts }
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn num_off_policy(&self) -> usize {
        self.rollouts.iter().filter(|r| r.is_off_policy()).count()
    }

    /// Sub-group of the given member indices, keeping every computed field.
    pub fn restrict(&self, indices: &[usize]) -> Group {
        Group {
            prompt: self.prompt.clone(),
            rollouts: indices.iter().map(|&i| self.rollouts[i].clone()).collect(),
        }
    }

    /// Members whose gradient contribution survives `masks`.
    pub fn retained(&self, masks: &MaskSet) -> Group {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| masks.weight(i) != 0.0).collect();
        self.restrict(&keep)
    }

    pub(crate) fn advantages(&self) -> Result<Vec<f64>> {
        self.rollouts
            .iter()
            .enumerate()
            .map(|(index, r)| r.advantage.ok_or(Error::MissingField { index, field: "advantage" }))
            .collect()
    }

    fn rewards(&self) -> Result<Vec<f64>> {
        self.rollouts
            .iter()
            .enumerate()
            .map(|(index, r)| {
                r.reward
                    .map(f64::from)
                    .ok_or(Error::MissingField { index, field: "reward" })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageKind {
    /// `(R − mean) / std` over the group.
    GrpoStandard,
    /// `R − mean`, no std normalization.
    DrGrpo,
    /// Standardized over a group that may contain off-policy anchors.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageMode {
    pub kind: AdvantageKind,
    pub epsilon_std: f64,
}

impl AdvantageMode {
    pub fn new(kind: AdvantageKind) -> Self {
        AdvantageMode {
            kind,
            epsilon_std: 1e-6,
        }
    }

    fn normalizes(&self) -> bool {
        !matches!(self.kind, AdvantageKind::DrGrpo)
    }
}

/// Sets every member's advantage. Population statistics (divide by `G`);
/// a normalizing mode whose reward std is below `epsilon_std` yields all
/// zeros.
pub fn compute_advantages(group: &Group, mode: AdvantageMode) -> Result<Group> {
    if group.len() < 2 {
        return Err(Error::GroupTooSmall(group.len()));
    }
    if !(mode.epsilon_std > 0.0) {
        return Err(Error::config("epsilon_std", "must be positive"));
    }
    let rewards = group.rewards()?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();

    let advantages: Vec<f64> = if mode.normalizes() {
        if std < mode.epsilon_std {
            vec![0.0; rewards.len()]
        } else {
            rewards.iter().map(|r| (r - mean) / std).collect()
        }
    } else {
        rewards.iter().map(|r| r - mean).collect()
    };

    let mut out = group.clone();
    for (r, a) in out.rollouts.iter_mut().zip(advantages) {
        r.advantage = Some(a);
    }
    Ok(out)
}

/// Strict-sign split into `G⁺`, `G⁻` and zero-advantage members.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub zeros: Vec<usize>,
}

pub fn partition(group: &Group) -> Result<Partition> {
    let mut part = Partition::default();
    for (i, a) in group.advantages()?.into_iter().enumerate() {
        if a > 0.0 {
            part.positives.push(i);
        } else if a < 0.0 {
            part.negatives.push(i);
        } else {
            part.zeros.push(i);
        }
    }
    Ok(part)
}

/// Keep/drop indicators `λ⁺`, `λ⁻` over a partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub lambda_plus: BTreeMap<usize, bool>,
    pub lambda_minus: BTreeMap<usize, bool>,
    pub s_max_neg: Option<f64>,
    pub s_min_pos: Option<f64>,
    pub delta: f64,
}

impl MaskSet {
    /// Every partitioned member retained.
    pub fn all_ones(part: &Partition) -> Self {
        MaskSet {
            lambda_plus: part.positives.iter().map(|&i| (i, true)).collect(),
            lambda_minus: part.negatives.iter().map(|&i| (i, true)).collect(),
            s_max_neg: None,
            s_min_pos: None,
            delta: 0.0,
        }
    }

    /// 1 for retained partition members, 0 for masked members and for
    /// indices outside the partition.
    pub fn weight(&self, index: usize) -> f64 {
        let kept = self
            .lambda_plus
            .get(&index)
            .or_else(|| self.lambda_minus.get(&index))
            .copied()
            .unwrap_or(false);
        if kept {
            1.0
        } else {
            0.0
        }
    }

    pub fn masked_positive_count(&self) -> usize {
        self.lambda_plus.values().filter(|&&k| !k).count()
    }

    pub fn masked_negative_count(&self) -> usize {
        self.lambda_minus.values().filter(|&&k| !k).count()
    }

    /// Checks that the masks are defined exactly on the partition indices.
    pub fn check_against(&self, part: &Partition) -> Result<()> {
        let plus: Vec<usize> = self.lambda_plus.keys().copied().collect();
        let minus: Vec<usize> = self.lambda_minus.keys().copied().collect();
        let mut positives = part.positives.clone();
        let mut negatives = part.negatives.clone();
        positives.sort_unstable();
        negatives.sort_unstable();
        if plus != positives {
            return Err(Error::MaskMismatch(format!(
                "λ⁺ indices {plus:?} vs positives {positives:?}"
            )));
        }
        if minus != negatives {
            return Err(Error::MaskMismatch(format!(
                "λ⁻ indices {minus:?} vs negatives {negatives:?}"
            )));
        }
        Ok(())
    }
}

/// A scored group with its advantages, sign partition and masks, as used
/// for one gradient contribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedGroup {
    pub group: Group,
    pub partition: Partition,
    pub masks: MaskSet,
}

impl MaskedGroup {
    /// Members that actually contribute to the gradient.
    pub fn effective(&self) -> Group {
        self.group.retained(&self.masks)
    }

    pub fn all_zero_advantage(&self) -> bool {
        self.partition.positives.is_empty() && self.partition.negatives.is_empty()
    }
}

fn score_of(group: &Group, index: usize) -> Result<f64> {
    group.rollouts[index]
        .judge_score
        .ok_or(Error::MissingField { index, field: "judge_score" })
}

/// Distinctiveness masks with margin `delta`.
///
/// `λ⁺(j) = 1` iff `S(o_j) − S_max− ≥ δ` and `λ⁻(k) = 1` iff
/// `S_min+ − S(o_k) ≥ δ`. With no negatives every positive is kept; with no
/// positives every negative is dropped.
pub fn compute_masks(group: &Group, part: &Partition, delta: f64) -> Result<MaskSet> {
    if !(delta >= 0.0) {
        return Err(Error::config("delta", "must be non-negative"));
    }
    let pos_scores: Vec<(usize, f64)> = part
        .positives
        .iter()
        .map(|&i| score_of(group, i).map(|s| (i, s)))
        .collect::<Result<_>>()?;
    let neg_scores: Vec<(usize, f64)> = part
        .negatives
        .iter()
        .map(|&i| score_of(group, i).map(|s| (i, s)))
        .collect::<Result<_>>()?;

    let s_max_neg = neg_scores.iter().map(|&(_, s)| s).reduce(f64::max);
    let s_min_pos = pos_scores.iter().map(|&(_, s)| s).reduce(f64::min);

    let lambda_plus = pos_scores
        .iter()
        .map(|&(i, s)| (i, s_max_neg.map_or(true, |m| s - m >= delta)))
        .collect();
    let lambda_minus = neg_scores
        .iter()
        .map(|&(i, s)| (i, s_min_pos.map_or(false, |m| m - s >= delta)))
        .collect();

    Ok(MaskSet {
        lambda_plus,
        lambda_minus,
        s_max_neg,
        s_min_pos,
        delta,
    })
}

/// `G_mix = G_on ∪ G_off`. Advantages are cleared because they must be
/// recomputed over the union.
pub fn mix_groups(on: Group, anchors: Vec<Rollout>) -> Result<Group> {
    let key = on.prompt.key();
    if let Some(bad) = anchors.iter().find(|a| a.prompt_id != key) {
        return Err(Error::PromptMismatch {
            expected: key,
            found: bad.prompt_id.clone(),
        });
    }
    let mut mixed = on;
    mixed.rollouts.extend(anchors);
    for r in &mut mixed.rollouts {
        r.advantage = None;
    }
    Ok(mixed)
}
