//! Per-step training metrics, the metrics log, and cross-run comparison.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantage::MaskedGroup;
use crate::error::{Error, Result};
use crate::policy::{contexts_along, policy_entropy, Context, PolicyParams};
use crate::tasks::read_jsonl;

/// One record of `metrics.jsonl`.
///
/// `wall_time` is measured but not serialized, so that metrics files of
/// identical runs are byte-identical; the trainer writes it to
/// `timing.jsonl` instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub step: u64,
    pub reward_mean: f64,
    pub response_length_mean: f64,
    pub entropy_mean: f64,
    pub grad_norm: f64,
    pub masked_pos_fraction: f64,
    pub masked_neg_fraction: f64,
    pub zero_advantage_group_fraction: f64,
    pub interference_index_mean: f64,
    pub cancellation_mass_mean: f64,
    #[serde(skip)]
    pub wall_time: f64,
}

/// Numeric fields in output order.
pub const METRIC_FIELDS: &[&str] = &[
    "reward_mean",
    "response_length_mean",
    "entropy_mean",
    "grad_norm",
    "masked_pos_fraction",
    "masked_neg_fraction",
    "zero_advantage_group_fraction",
    "interference_index_mean",
    "cancellation_mass_mean",
];

impl StepMetrics {
    pub fn field(&self, name: &str) -> Option<f64> {
        Some(match name {
            "reward_mean" => self.reward_mean,
            "response_length_mean" => self.response_length_mean,
            "entropy_mean" => self.entropy_mean,
            "grad_norm" => self.grad_norm,
            "masked_pos_fraction" => self.masked_pos_fraction,
            "masked_neg_fraction" => self.masked_neg_fraction,
            "zero_advantage_group_fraction" => self.zero_advantage_group_fraction,
            "interference_index_mean" => self.interference_index_mean,
            "cancellation_mass_mean" => self.cancellation_mass_mean,
            _ => return None,
        })
    }

    pub fn is_finite(&self) -> bool {
        METRIC_FIELDS.iter().all(|f| self.field(f).is_some_and(f64::is_finite)) && self.wall_time.is_finite()
    }
}

/// Per-group conflict indices `(interference_index, cancellation_mass)`.
pub type GroupConflict = (f64, f64);

/// Contexts visited by the on-policy rollouts of `groups`, one entry per
/// generated token.
pub fn visited_contexts(groups: &[MaskedGroup], order: usize) -> Vec<Context> {
    let mut out = Vec::new();
    for mg in groups {
        let key = std::sync::Arc::from(mg.group.prompt.key());
        for r in mg.group.rollouts.iter().filter(|r| !r.is_off_policy()) {
            out.extend(contexts_along(&key, &r.tokens, order));
        }
    }
    out
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Metrics of one completed step.
///
/// Reward and length means are over on-policy rollouts; entropy is over the
/// contexts those rollouts visited, under `params` (the sampling policy).
/// `grad_norms` holds the L2 norm of every optimizer update applied in the
/// step and is averaged. Conflict means are over all groups.
pub fn summarize_step(
    step: u64,
    groups: &[MaskedGroup],
    grad_norms: &[f64],
    conflicts: &[GroupConflict],
    params: &PolicyParams,
) -> Result<StepMetrics> {
    let on_policy = || groups.iter().flat_map(|g| g.group.rollouts.iter()).filter(|r| !r.is_off_policy());
    let reward_mean = mean(on_policy().map(|r| r.reward.unwrap_or(0) as f64));
    let response_length_mean = mean(on_policy().map(|r| r.len() as f64));
    let contexts = visited_contexts(groups, params.order());
    let entropy_mean = if contexts.is_empty() { 0.0 } else { policy_entropy(params, &contexts)? };

    let (mut pos, mut pos_masked, mut neg, mut neg_masked) = (0usize, 0usize, 0usize, 0usize);
    for g in groups {
        pos += g.masks.lambda_plus.len();
        neg += g.masks.lambda_minus.len();
        pos_masked += g.masks.masked_positive_count();
        neg_masked += g.masks.masked_negative_count();
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };

    Ok(StepMetrics {
        step,
        reward_mean,
        response_length_mean,
        entropy_mean,
        grad_norm: mean(grad_norms.iter().copied()),
        masked_pos_fraction: frac(pos_masked, pos),
        masked_neg_fraction: frac(neg_masked, neg),
        zero_advantage_group_fraction: frac(groups.iter().filter(|g| g.all_zero_advantage()).count(), groups.len()),
        interference_index_mean: mean(conflicts.iter().map(|c| c.0)),
        cancellation_mass_mean: mean(conflicts.iter().map(|c| c.1)),
        wall_time: 0.0,
    })
}

/// Appends one JSON record per line and flushes after each.
pub struct JsonlWriter {
    path: PathBuf,
    file: File,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter { path: path.to_path_buf(), file })
    }

    /// Opens for appending after dropping every record whose `"step"` is
    /// greater than `keep_through`.
    pub fn resume(path: &Path, keep_through: u64) -> Result<Self> {
        let mut kept = String::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::File {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
                if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s <= keep_through) {
                    kept.push_str(&line);
                    kept.push('\n');
                }
            }
        }
        std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter { path: path.to_path_buf(), file })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let records: Vec<StepMetrics> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(Error::File {
            path: path.to_path_buf(),
            reason: "no metrics records".into(),
        });
    }
    if let Some(w) = records.windows(2).find(|w| w[1].step <= w[0].step) {
        return Err(Error::File {
            path: path.to_path_buf(),
            reason: format!("step {} follows step {}", w[1].step, w[0].step),
        });
    }
    Ok(records)
}

/// Metric series of several runs aligned on their common steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub steps: Vec<u64>,
    /// `series[run][field][k]` for `steps[k]` and `METRIC_FIELDS[field]`.
    pub series: Vec<Vec<Vec<f64>>>,
    /// Mean over the last `window` aligned steps, `[run][field]`.
    pub final_means: Vec<Vec<f64>>,
    pub window: usize,
}

pub const FINAL_WINDOW: usize = 50;

fn label_for(path: &Path, index: usize, taken: &[String]) -> String {
    let base = if path.file_name().is_some_and(|n| n == "metrics.jsonl") {
        path.parent().and_then(|p| p.file_name())
    } else {
        path.file_stem()
    }
    .map(|n| n.to_string_lossy().into_owned())
    .unwrap_or_else(|| format!("run{index}"));
    if taken.contains(&base) {
        format!("{base}#{index}")
    } else {
        base
    }
}

pub fn compare_runs(paths: &[PathBuf]) -> Result<Comparison> {
    if paths.len() < 2 {
        return Err(Error::MissingData("compare needs at least two metrics files".into()));
    }
    let runs: Vec<Vec<StepMetrics>> = paths.iter().map(|p| read_metrics(p)).collect::<Result<_>>()?;
    let mut steps: Vec<u64> = runs[0].iter().map(|m| m.step).collect();
    for (run, path) in runs.iter().zip(paths).skip(1) {
        steps.retain(|s| run.binary_search_by_key(s, |m| m.step).is_ok());
        if steps.is_empty() {
            return Err(Error::File {
                path: path.clone(),
                reason: "step range does not overlap the other runs".into(),
            });
        }
    }
    let mut labels = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let l = label_for(p, i, &labels);
        labels.push(l);
    }
    let window = FINAL_WINDOW.min(steps.len());
    let mut series = Vec::new();
    let mut final_means = Vec::new();
    for run in &runs {
        let aligned: Vec<&StepMetrics> = steps
            .iter()
            .map(|s| &run[run.binary_search_by_key(s, |m| m.step).expect("aligned step")])
            .collect();
        let cols: Vec<Vec<f64>> = METRIC_FIELDS
            .iter()
            .map(|f| aligned.iter().map(|m| m.field(f).expect("known field")).collect())
            .collect();
        final_means.push(cols.iter().map(|c: &Vec<f64>| mean(c[c.len() - window..].iter().copied())).collect());
        series.push(cols);
    }
    Ok(Comparison { labels, steps, series, final_means, window })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for l in &self.labels {
            for f in METRIC_FIELDS {
                let _ = write!(out, ",{l}.{f}");
            }
        }
        out.push('\n');
        for (k, step) in self.steps.iter().enumerate() {
            let _ = write!(out, "{step}");
            for run in &self.series {
                for col in run {
                    let _ = write!(out, ",{:?}", col[k]);
                }
            }
            out.push('\n');
        }
        out
    }

    /// One row per run with the final-window means.
    pub fn summary_csv(&self) -> String {
        let mut out = format!("run,window");
        for f in METRIC_FIELDS {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
        for (l, means) in self.labels.iter().zip(&self.final_means) {
            let _ = write!(out, "{l},{}", self.window);
            for m in means {
                let _ = write!(out, ",{m:?}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advantage::{compute_advantages, partition, AdvantageKind, AdvantageMode, Group, MaskSet};
    use crate::policy::Token;
    use crate::tasks::{reference_solution, OpCode, Operation, Origin, Prompt, Rollout};

    pub(crate) fn record(step: u64, reward: f64) -> StepMetrics {
        StepMetrics {
            step,
            reward_mean: reward,
            response_length_mean: 3.0,
            entropy_mean: 0.5,
            grad_norm: 0.1,
            masked_pos_fraction: 0.0,
            masked_neg_fraction: 0.25,
            zero_advantage_group_fraction: 0.5,
            interference_index_mean: 0.3,
            cancellation_mass_mean: 0.1,
            wall_time: 0.0,
        }
    }

    fn write(path: &Path, records: &[StepMetrics]) {
        crate::tasks::write_jsonl(path, records).unwrap();
    }

    #[test]
    fn all_correct_deterministic_groups() {
        let p = Prompt::new(3, vec![Operation { op_code: OpCode::Add, operand: 5 }], 16).unwrap();
        let reference = reference_solution(&p);
        // a policy that puts all mass on the reference path
        let mut params = PolicyParams::new(18, 2);
        let key = std::sync::Arc::from(p.key());
        for (ctx, tok) in contexts_along(&key, &reference, 2).into_iter().zip(&reference) {
            let mut row = vec![-1e4; 18];
            row[tok.index()] = 0.0;
            params.set_row(ctx, row);
        }
        let rollouts: Vec<Rollout> = (0..4)
            .map(|_| {
                let mut r = Rollout::new(&p, reference.clone(), Origin::OnPolicy);
                r.reward = Some(1);
                r
            })
            .collect();
        let g = compute_advantages(&Group::new(p, rollouts), AdvantageMode::new(AdvantageKind::GrpoStandard)).unwrap();
        let part = partition(&g).unwrap();
        let mg = MaskedGroup { masks: MaskSet::all_ones(&part), partition: part, group: g };
        let m = summarize_step(1, &[mg], &[0.0], &[(0.0, 0.0)], &params).unwrap();
        assert_eq!(m.reward_mean, 1.0);
        assert_eq!(m.entropy_mean, 0.0);
        assert_eq!(m.grad_norm, 0.0);
        assert_eq!(m.response_length_mean, 3.0);
        assert_eq!(m.zero_advantage_group_fraction, 1.0);
        assert!(m.is_finite());
        let _ = Token(0);
    }

    #[test]
    fn conflict_means_are_arithmetic() {
        let params = PolicyParams::new(18, 2);
        let m = summarize_step(1, &[], &[], &[(0.2, 0.0), (0.4, 1.0)], &params).unwrap();
        assert!((m.interference_index_mean - 0.3).abs() < 1e-15);
        assert_eq!(m.cancellation_mass_mean, 0.5);
    }

    #[test]
    fn records_round_trip_exactly() {
        let mut r = record(3, 0.1 + 0.2);
        r.entropy_mean = std::f64::consts::PI / 7.0;
        let text = serde_json::to_string(&r).unwrap();
        let back: StepMetrics = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert!(!text.contains("wall_time"));
    }

    #[test]
    fn compare_self_gives_identical_groups() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        write(&a, &(1..=60).map(|s| record(s, 0.75)).collect::<Vec<_>>());
        let c = compare_runs(&[a.clone(), a]).unwrap();
        assert_eq!(c.series[0], c.series[1]);
        assert_ne!(c.labels[0], c.labels[1]);
        assert_eq!(c.window, 50);
        assert_eq!(c.final_means[0][0], 0.75);
        assert_eq!(c.to_csv().lines().count(), 61);
    }

    #[test]
    fn compare_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let empty = dir.path().join("empty.jsonl");
        write(&a, &[record(1, 0.0), record(2, 0.0)]);
        write(&b, &[record(3, 0.0), record(4, 0.0)]);
        std::fs::write(&empty, "").unwrap();
        let err = compare_runs(&[a.clone(), b.clone()]).unwrap_err();
        assert!(err.to_string().contains("b.jsonl"));
        let err = compare_runs(&[a.clone(), empty]).unwrap_err();
        assert!(err.to_string().contains("empty.jsonl"));
        std::fs::write(&b, "{\"step\": 1, \"loss\": 2}\n").unwrap();
        let err = compare_runs(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("b.jsonl"));
    }

    #[test]
    fn resume_truncates_later_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write(&path, &(1..=5).map(|s| record(s, 0.0)).collect::<Vec<_>>());
        let mut w = JsonlWriter::resume(&path, 3).unwrap();
        w.append(&record(4, 1.0)).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.iter().map(|m| m.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(back[3].reward_mean, 1.0);
    }
}
