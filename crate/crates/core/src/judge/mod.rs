//! Fine-grained rollout scoring on a 1–10 scale against the reference
//! demonstration.
//!
//! The default oracle judge is deterministic and combines three rubric
//! dimensions with equal weight:
//!
//! ```text
//! S = 1 + 3·(c_a + c_v + c_c)
//! c_a = final-answer reward, c_v = fraction of correct steps,
//! c_c = min(1, emitted steps / L)
//! ```
//!
//! [`ExternalJudge`] asks a chat-completion service instead and falls back to
//! the oracle (or aborts) when the service fails.

mod external;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use external::{parse_score, EndpointConfig, ExternalJudge, JudgeRequest, RUBRIC, RUBRIC_VERSION};

use crate::advantage::Group;
use crate::error::{Error, Result};
use crate::policy::Token;
use crate::tasks::{emitted_steps, reference_solution, step_fraction, verify, Prompt, Rollout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeSource {
    Oracle,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub value: f64,
    pub source: JudgeSource,
}

impl JudgeScore {
    pub fn new(value: f64, source: JudgeSource) -> Result<Self> {
        if !(1.0..=10.0).contains(&value) {
            return Err(Error::MalformedJudgment(format!("score {value} outside [1, 10]")));
        }
        Ok(JudgeScore { value, source })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    Oracle,
    External,
}

/// What to do when the external judge fails.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeFallback {
    Oracle,
    Abort,
}

/// The three rubric components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RubricComponents {
    pub answer: f64,
    pub validity: f64,
    pub completeness: f64,
}

impl RubricComponents {
    pub fn of(prompt: &Prompt, tokens: &[Token]) -> Self {
        let l = prompt.difficulty as f64;
        RubricComponents {
            answer: verify(prompt, tokens) as f64,
            validity: step_fraction(prompt, tokens),
            completeness: (emitted_steps(prompt, tokens) as f64 / l).min(1.0),
        }
    }

    pub fn score(&self) -> f64 {
        1.0 + 3.0 * (self.answer + self.validity + self.completeness)
    }
}

/// Deterministic score of `rollout`. The oracle reads correctness straight
/// from the prompt, so the reference only has to be the prompt's own
/// reference solution.
pub fn oracle_score(prompt: &Prompt, rollout: &Rollout, reference: &[Token]) -> JudgeScore {
    debug_assert_eq!(reference, reference_solution(prompt).as_slice());
    JudgeScore {
        value: RubricComponents::of(prompt, &rollout.tokens).score(),
        source: JudgeSource::Oracle,
    }
}

/// Scores whole groups with the configured backend.
pub struct Judge {
    mode: JudgeMode,
    fallback: JudgeFallback,
    external: Option<ExternalJudge>,
    fallbacks: AtomicUsize,
}

impl Judge {
    pub fn oracle() -> Self {
        Judge {
            mode: JudgeMode::Oracle,
            fallback: JudgeFallback::Oracle,
            external: None,
            fallbacks: AtomicUsize::new(0),
        }
    }

    pub fn external(client: ExternalJudge, fallback: JudgeFallback) -> Self {
        Judge {
            mode: JudgeMode::External,
            fallback,
            external: Some(client),
            fallbacks: AtomicUsize::new(0),
        }
    }

    pub fn mode(&self) -> JudgeMode {
        self.mode
    }

    /// Number of rollouts scored by the oracle after an external failure.
    pub fn fallback_count(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    /// Sets `judge_score` on every member, on- and off-policy alike.
    pub fn score_group(&self, group: &Group) -> Result<Group> {
        Ok(self.score_groups(std::slice::from_ref(group))?.remove(0))
    }

    /// Scores many groups at once. External requests of all groups share
    /// one bounded batch.
    pub fn score_groups(&self, groups: &[Group]) -> Result<Vec<Group>> {
        let references: Vec<Vec<Token>> = groups.iter().map(|g| reference_solution(&g.prompt)).collect();
        let mut scores: Vec<f64> = Vec::new();
        match (&self.mode, &self.external) {
            (JudgeMode::External, Some(client)) => {
                let mut requests = Vec::new();
                for (g, reference) in groups.iter().zip(&references) {
                    for r in &g.rollouts {
                        requests.push(JudgeRequest::render(&g.prompt, &r.tokens, reference));
                    }
                }
                let mut results = client.score_batch(&requests).into_iter();
                for (g, reference) in groups.iter().zip(&references) {
                    for r in &g.rollouts {
                        let s = match results.next().expect("one result per request") {
                            Ok(s) => s.value,
                            Err(e) if self.fallback == JudgeFallback::Oracle => {
                                log::warn!("external judge failed ({e}); using oracle score");
                                self.fallbacks.fetch_add(1, Ordering::Relaxed);
                                oracle_score(&g.prompt, r, reference).value
                            }
                            Err(e) => return Err(e),
                        };
                        scores.push(s);
                    }
                }
            }
            _ => {
                for (g, reference) in groups.iter().zip(&references) {
                    for r in &g.rollouts {
                        scores.push(oracle_score(&g.prompt, r, reference).value);
                    }
                }
            }
        }
        let mut scores = scores.into_iter();
        Ok(groups
            .iter()
            .map(|g| {
                let mut out = g.clone();
                for r in &mut out.rollouts {
                    r.judge_score = scores.next();
                }
                out
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{demonstrate, OpCode, Operation, Origin, TaskConfig};
    use proptest::prelude::*;

    fn prompt2() -> Prompt {
        Prompt::new(
            3,
            vec![
                Operation { op_code: OpCode::Add, operand: 5 },
                Operation { op_code: OpCode::Mul, operand: 2 },
            ],
            16,
        )
        .unwrap()
    }

    fn rollout(p: &Prompt, ids: &[u16]) -> Rollout {
        Rollout::new(p, ids.iter().map(|&i| Token(i)).collect(), Origin::OnPolicy)
    }

    #[test]
    fn score_extremes_and_formula() {
        let p = prompt2();
        let reference = reference_solution(&p);
        let perfect = Rollout::new(&p, reference.clone(), Origin::OnPolicy);
        assert_eq!(oracle_score(&p, &perfect, &reference).value, 10.0);
        assert_eq!(oracle_score(&p, &rollout(&p, &[]), &reference).value, 1.0);
        assert_eq!(oracle_score(&p, &rollout(&p, &[17, 17, 16]), &reference).value, 1.0);
        // wrong answer, half the steps right, full length
        let half = rollout(&p, &[8, 16, 5, 16, 17]);
        assert_eq!(oracle_score(&p, &half, &reference).value, 5.5);
    }

    #[test]
    fn well_formed_correct_rollouts_meet_the_floor() {
        let p = prompt2();
        let reference = reference_solution(&p);
        // lucky guess: first step wrong, final right
        let lucky = rollout(&p, &[9, 16, 0, 16, 17]);
        let s = oracle_score(&p, &lucky, &reference).value;
        assert_eq!(s, 1.0 + 3.0 * (1.0 + 0.5 + 1.0));
    }

    #[test]
    fn group_scoring() {
        let p = prompt2();
        let reference = reference_solution(&p);
        let members = (0..4).map(|_| Rollout::new(&p, reference.clone(), Origin::OnPolicy)).collect();
        let g = Judge::oracle().score_group(&Group::new(p.clone(), members)).unwrap();
        assert!(g.rollouts.iter().all(|r| r.judge_score == Some(10.0)));

        let noisy = TaskConfig { noise_rate: 1.0, ..TaskConfig::default() };
        let mut rng = crate::rng::stream(1, &[]);
        // corrupt the final value so the anchor's answer breaks
        let mut anchor = demonstrate(&p, &noisy, &mut rng);
        anchor.tokens = reference.clone();
        anchor.tokens[2] = Token(1);
        let clean = Rollout::new(&p, reference.clone(), Origin::OffPolicy);
        let g = Group::new(p, vec![rollout(&prompt2(), &[1, 16, 17]), anchor, clean]);
        let a = Judge::oracle().score_group(&g).unwrap();
        let b = Judge::oracle().score_group(&g).unwrap();
        assert_eq!(a, b);
        assert!(a.rollouts[1].judge_score.unwrap() < 10.0);
        assert_eq!(a.rollouts[2].judge_score, Some(10.0));
    }

    #[test]
    fn judge_score_range_is_enforced() {
        assert!(JudgeScore::new(0.5, JudgeSource::Oracle).is_err());
        assert!(JudgeScore::new(10.5, JudgeSource::External).is_err());
        assert!(JudgeScore::new(7.0, JudgeSource::External).is_ok());
    }

    proptest! {
        #[test]
        fn score_is_monotone_in_each_component(
            a in 0u8..=1, v in 0.0f64..=1.0, c in 0.0f64..=1.0, bump in 0.0f64..=1.0,
        ) {
            let base = RubricComponents { answer: a as f64, validity: v, completeness: c };
            let s = base.score();
            prop_assert!((1.0..=10.0).contains(&s));
            let up_v = RubricComponents { validity: (v + bump).min(1.0), ..base }.score();
            let up_c = RubricComponents { completeness: (c + bump).min(1.0), ..base }.score();
            let up_a = RubricComponents { answer: 1.0, ..base }.score();
            prop_assert!(up_v >= s && up_c >= s && up_a >= s);
        }

        #[test]
        fn oracle_scores_stay_in_range(ids in prop::collection::vec(0u16..18, 0..12), len in 1usize..4) {
            let ops = (0..len).map(|i| Operation { op_code: OpCode::ALL[i % 3], operand: i as u16 }).collect();
            let p = Prompt::new(5, ops, 16).unwrap();
            let r = rollout(&p, &ids);
            let s = oracle_score(&p, &r, &reference_solution(&p)).value;
            prop_assert!((1.0..=10.0).contains(&s));
            if verify(&p, &r.tokens) == 1 {
                prop_assert!(s >= 1.0 + 3.0 * (1.0 + 1.0 / len as f64 + 1.0));
            }
        }
    }
}
