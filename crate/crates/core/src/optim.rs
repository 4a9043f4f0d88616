//! Adam (L2 folded into the gradient) and AdamW (decoupled weight decay),
//! plus a piecewise-constant learning-rate schedule.
//!
//! Both optimizers use bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl OptimState {
    /// Zeroed moments for parameter tensors of the given lengths.
    pub fn new(shapes: impl IntoIterator<Item = usize>, lr: f64, weight_decay: f64) -> Self {
        let lens: Vec<usize> = shapes.into_iter().collect();
        Self {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            weight_decay,
        }
    }

    pub fn for_params(params: &[Vec<f64>], lr: f64, weight_decay: f64) -> Self {
        Self::new(params.iter().map(Vec::len), lr, weight_decay)
    }

    fn check(&self, params: &[Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        let ok = params.len() == grads.len()
            && params.len() == self.m.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.m)
                .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
        if !ok {
            return Err(Error::ShapeMismatch(
                "parameters, gradients and optimizer moments disagree".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Decay {
    Coupled,
    Decoupled,
}

fn step(state: &mut OptimState, params: &mut [Vec<f64>], grads: &[Vec<f64>], decay: Decay) -> Result<()> {
    state.check(params, grads)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.lr;
    let wd = state.weight_decay;
    let shrink = 1.0 - lr * wd;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            let gi = if decay == Decay::Coupled && wd != 0.0 {
                g[i] + wd * p[i]
            } else {
                g[i]
            };
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
            p[i] = match decay {
                Decay::Coupled => p[i] - update,
                Decay::Decoupled => p[i] * shrink - update,
            };
        }
    }
    Ok(())
}

/// Adam step; a nonzero `weight_decay` is added to the gradient as L2.
pub fn adam_step(state: &mut OptimState, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
    step(state, params, grads, Decay::Coupled)
}

/// AdamW step; weight decay shrinks parameters by `1 - lr·weight_decay`
/// outside the adaptive term.
pub fn adamw_step(state: &mut OptimState, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
    step(state, params, grads, Decay::Decoupled)
}

/// One schedule tier: `lr` from `start_epoch` (0-based) onward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tier {
    pub start_epoch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    tiers: Vec<Tier>,
}

pub const DEFAULT_TIER_RATES: [f64; 5] = [1e-3, 5e-4, 1e-4, 5e-5, 1e-5];

impl LrSchedule {
    pub fn new(tiers: Vec<Tier>) -> Result<Self> {
        let first = tiers.first().ok_or(Error::InvalidConfig("schedule has no tiers".into()))?;
        if first.start_epoch != 0 {
            return Err(Error::InvalidConfig("first schedule tier must start at epoch 0".into()));
        }
        for t in &tiers {
            if !(t.lr > 0.0) || !t.lr.is_finite() {
                return Err(Error::InvalidConfig(format!("learning rate {} is not positive", t.lr)));
            }
        }
        for pair in tiers.windows(2) {
            if pair[1].start_epoch <= pair[0].start_epoch {
                return Err(Error::InvalidConfig("tier start epochs must increase".into()));
            }
            if pair[1].lr > pair[0].lr {
                return Err(Error::InvalidConfig("tier learning rates must not increase".into()));
            }
        }
        Ok(Self { tiers })
    }

    pub fn constant(lr: f64) -> Result<Self> {
        Self::new(vec![Tier { start_epoch: 0, lr }])
    }

    /// Five tiers from 1e-3 down to 1e-5 at equal fractions of `epochs`.
    /// Short budgets keep the earliest tier of each colliding start epoch.
    pub fn tiered(epochs: usize) -> Self {
        let n = DEFAULT_TIER_RATES.len();
        let mut tiers: Vec<Tier> = Vec::with_capacity(n);
        for (k, &lr) in DEFAULT_TIER_RATES.iter().enumerate() {
            let start_epoch = k * epochs / n;
            if tiers.last().is_some_and(|t| t.start_epoch == start_epoch) {
                continue;
            }
            tiers.push(Tier { start_epoch, lr });
        }
        Self { tiers }
    }

    pub fn tiers(&self) -> &[Tier] {
        &self.tiers
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.tiers
            .iter()
            .take_while(|t| t.start_epoch <= epoch)
            .last()
            .expect("first tier starts at 0")
            .lr
    }
}
