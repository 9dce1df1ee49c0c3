//! Gradient-ascent optimizers over sparse policy rows.
//!
//! Adam is lazy: moments of a row only change when the row appears in the
//! gradient, while bias correction uses the global update count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::GradientVector;
use crate::policy::{Context, PolicyParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    m: BTreeMap<Context, Vec<f64>>,
    v: BTreeMap<Context, Vec<f64>>,
}

/// Serialized optimizer state; contexts use their text encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub t: u64,
    pub first_moment: Vec<(String, Vec<f64>)>,
    pub second_moment: Vec<(String, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn updates(&self) -> u64 {
        self.t
    }

    /// Moves `params` along `grad` (ascent).
    pub fn step(&mut self, params: &mut PolicyParams, grad: &GradientVector) -> Result<()> {
        grad.check_finite()?;
        if grad.vocab_size() != params.vocab_size() {
            return Err(Error::NonFiniteGradient(format!(
                "gradient width {} does not match vocabulary {}",
                grad.vocab_size(),
                params.vocab_size()
            )));
        }
        self.t += 1;
        let lr = self.cfg.learning_rate;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                if lr == 0.0 {
                    return Ok(());
                }
                for (ctx, g) in grad.rows() {
                    let row = params.row_mut(ctx);
                    for (w, gj) in row.iter_mut().zip(g) {
                        *w += lr * gj;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                let width = params.vocab_size();
                for (ctx, g) in grad.rows() {
                    let m = self.m.entry(ctx.clone()).or_insert_with(|| vec![0.0; width]);
                    let v = self.v.entry(ctx.clone()).or_insert_with(|| vec![0.0; width]);
                    for j in 0..width {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    }
                    if lr == 0.0 {
                        continue;
                    }
                    let row = params.row_mut(ctx);
                    for j in 0..width {
                        row[j] += lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn state(&self) -> OptimizerState {
        let dump = |map: &BTreeMap<Context, Vec<f64>>| map.iter().map(|(c, r)| (c.encode(), r.clone())).collect();
        OptimizerState {
            kind: self.cfg.kind,
            t: self.t,
            first_moment: dump(&self.m),
            second_moment: dump(&self.v),
        }
    }

    pub fn restore(cfg: OptimizerConfig, state: &OptimizerState) -> Result<Self> {
        if state.kind != cfg.kind {
            return Err(Error::config("optimizer", "checkpoint was written by a different optimizer"));
        }
        let load = |rows: &[(String, Vec<f64>)]| -> Result<BTreeMap<Context, Vec<f64>>> {
            rows.iter()
                .map(|(c, r)| {
                    let ctx = Context::decode(c).ok_or_else(|| Error::MissingData(format!("bad context {c:?} in optimizer state")))?;
                    Ok((ctx, r.clone()))
                })
                .collect()
        };
        Ok(Optimizer {
            cfg,
            t: state.t,
            m: load(&state.first_moment)?,
            v: load(&state.second_moment)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn cfg(kind: OptimizerKind, lr: f64) -> OptimizerConfig {
        OptimizerConfig { kind, learning_rate: lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn grad() -> GradientVector {
        let mut g = GradientVector::new(3);
        let ctx = Context::new(Arc::from("p"), &[], 2);
        *g.row_mut(ctx) = vec![0.5, -0.25, 0.0];
        g
    }

    #[test]
    fn sgd_ascends() {
        let mut p = PolicyParams::new(3, 2);
        let mut o = Optimizer::new(cfg(OptimizerKind::Sgd, 0.1));
        o.step(&mut p, &grad()).unwrap();
        let ctx = Context::new(Arc::from("p"), &[], 2);
        assert_eq!(p.logits(&ctx), vec![0.05, -0.025, 0.0]);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut p = PolicyParams::new(3, 2);
        let mut o = Optimizer::new(cfg(OptimizerKind::Adam, 0.1));
        o.step(&mut p, &grad()).unwrap();
        let ctx = Context::new(Arc::from("p"), &[], 2);
        let l = p.logits(&ctx);
        assert!((l[0] - 0.1).abs() < 1e-6 && (l[1] + 0.1).abs() < 1e-6 && l[2] == 0.0);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = PolicyParams::new(3, 2);
            let mut o = Optimizer::new(cfg(kind, 0.0));
            o.step(&mut p, &grad()).unwrap();
            assert!(p.same_values(&PolicyParams::new(3, 2)));
        }
    }

    #[test]
    fn state_round_trips() {
        let mut p = PolicyParams::new(3, 2);
        let mut o = Optimizer::new(cfg(OptimizerKind::Adam, 0.1));
        o.step(&mut p, &grad()).unwrap();
        let restored = Optimizer::restore(*o.config(), &o.state()).unwrap();
        assert_eq!(restored, o);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut g = grad();
        let ctx = Context::new(Arc::from("p"), &[], 2);
        g.row_mut(ctx)[1] = f64::NAN;
        let mut o = Optimizer::new(cfg(OptimizerKind::Sgd, 0.1));
        assert!(o.step(&mut PolicyParams::new(3, 2), &g).is_err());
    }
}
