//! Large-batch optimizer recipe: momentum SGD with coupled weight decay, the
//! linear learning-rate scaling rule, linear warmup followed by polynomial
//! decay, and layer-wise adaptive rate scaling (LARS).
//!
//! The update for every parameter group is
//!
//! ```text
//! g  = grad + weight_decay * w
//! λ  = trust * ‖w‖ / (‖grad‖ + weight_decay * ‖w‖)   (1 when LARS is off or skipped)
//! v  = momentum * v + λ * lr * g
//! w  = w - v
//! ```
//!
//! where `lr` is the scheduled global rate. Momentum buffers are carried over
//! unchanged when `lr` changes.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::nn::{Category, ParamGroup, ParamSet};
use crate::tensor::Tensor;

pub const DEFAULT_LARS_TRUST: f64 = 0.001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("schedule exhausted: iteration {iteration} > max {max}")]
    ScheduleExhausted { iteration: u64, max: u64 },
    #[error("non-finite update in group {group} at iteration {iteration}")]
    Divergence { iteration: u64, group: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub warmup_epochs: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub lars_enabled: bool,
    pub lars_trust: f64,
    pub lars_skip: BTreeSet<Category>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            base_lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.0005,
            poly_power: 2.0,
            warmup_epochs: 0,
            epochs: 1,
            batch_size: 32,
            lars_enabled: false,
            lars_trust: DEFAULT_LARS_TRUST,
            lars_skip: [Category::Bias, Category::NormScale, Category::NormShift]
                .into_iter()
                .collect(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidHyperParams(m));
        let finite = [
            ("base_lr", self.base_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("poly_power", self.poly_power),
            ("lars_trust", self.lars_trust),
        ];
        if let Some((name, v)) = finite.iter().find(|(_, v)| !v.is_finite()) {
            return bad(format!("{name} must be finite, got {v}"));
        }
        if self.base_lr <= 0.0 {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.poly_power <= 0.0 {
            return bad(format!("poly_power must be positive, got {}", self.poly_power));
        }
        if self.lars_trust <= 0.0 {
            return bad(format!("lars_trust must be positive, got {}", self.lars_trust));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be less than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        Ok(())
    }
}

/// Position in the iteration budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleState {
    pub iteration: u64,
    pub max_iterations: u64,
    pub iterations_per_epoch: u64,
}

impl ScheduleState {
    /// Budget of `floor(epochs * n / batch_size)` iterations over `n` training
    /// examples, with `floor(n / batch_size)` iterations per epoch.
    pub fn new(hp: &HyperParams, n: u64) -> Result<Self, OptimError> {
        hp.validate()?;
        let b = hp.batch_size as u64;
        let iterations_per_epoch = n / b;
        if iterations_per_epoch == 0 {
            return Err(OptimError::Domain(format!(
                "batch size {b} exceeds the {n} training examples"
            )));
        }
        Ok(Self {
            iteration: 0,
            max_iterations: hp.epochs * n / b,
            iterations_per_epoch,
        })
    }

    pub fn warmup_iterations(&self, hp: &HyperParams) -> u64 {
        hp.warmup_epochs * self.iterations_per_epoch
    }

    pub fn epoch(&self) -> u64 {
        self.iteration / self.iterations_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.max_iterations
    }
}

/// `base_lr` scaled by `new_batch / base_batch`.
pub fn linear_scaled_lr(base_lr: f64, base_batch: usize, new_batch: usize) -> Result<f64, OptimError> {
    if base_batch == 0 || new_batch == 0 {
        return Err(OptimError::Domain(format!(
            "batch sizes must be positive, got {base_batch} and {new_batch}"
        )));
    }
    Ok(base_lr * (new_batch as f64 / base_batch as f64))
}

/// Global learning rate at `st.iteration`.
///
/// During the first `W = warmup_epochs * iterations_per_epoch` iterations the
/// rate is `base_lr * (i + 1) / W`, so it starts at `base_lr / W` and reaches
/// `base_lr` on the last warmup iteration. Afterwards it is
/// `base_lr * (1 - (i - W) / (max - W))^poly_power`, which is `base_lr` at
/// `i = W` and `0` at `i = max`.
pub fn scheduled_lr(hp: &HyperParams, st: &ScheduleState) -> Result<f64, OptimError> {
    if st.iteration > st.max_iterations {
        return Err(OptimError::ScheduleExhausted {
            iteration: st.iteration,
            max: st.max_iterations,
        });
    }
    let warmup = st.warmup_iterations(hp);
    if st.iteration < warmup {
        return Ok(hp.base_lr * ((st.iteration + 1) as f64 / warmup as f64));
    }
    let span = st.max_iterations - warmup;
    if span == 0 {
        return Ok(hp.base_lr);
    }
    let progress = (st.iteration - warmup) as f64 / span as f64;
    Ok(hp.base_lr * (1.0 - progress).powf(hp.poly_power))
}

/// Layer-wise rate multiplier of one group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LarsScale {
    pub lambda: f64,
    /// Gradient and decay terms were both zero while the weights were not;
    /// `lambda` was set to 1.
    pub fallback: bool,
}

/// `trust * ‖param‖ / (‖grad‖ + weight_decay * ‖param‖)`.
///
/// All-zero weights give 0. A zero denominator with nonzero weights gives 1
/// and sets `fallback`.
pub fn lars_local_lr(param: &Tensor, grad: &Tensor, weight_decay: f64, trust: f64) -> Result<LarsScale, OptimError> {
    if param.shape() != grad.shape() {
        return Err(OptimError::Domain(format!(
            "param shape {:?} vs grad shape {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let w = param.l2_norm();
    if w == 0.0 {
        return Ok(LarsScale {
            lambda: 0.0,
            fallback: false,
        });
    }
    let denom = grad.l2_norm() + weight_decay * w;
    if denom == 0.0 {
        return Ok(LarsScale {
            lambda: 1.0,
            fallback: true,
        });
    }
    Ok(LarsScale {
        lambda: trust * w / denom,
        fallback: false,
    })
}

/// Per-group multiplier under `hp`: 1 when LARS is off or the group's
/// category is skipped.
pub fn group_scale(group: &ParamGroup, hp: &HyperParams) -> Result<GroupScale, OptimError> {
    let applied = hp.lars_enabled && !hp.lars_skip.contains(&group.category);
    let scale = if applied {
        lars_local_lr(&group.param, &group.grad, hp.weight_decay, hp.lars_trust)?
    } else {
        LarsScale {
            lambda: 1.0,
            fallback: false,
        }
    };
    Ok(GroupScale {
        name: group.name.clone(),
        lambda: scale.lambda,
        applied,
        fallback: scale.fallback,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupScale {
    pub name: String,
    pub lambda: f64,
    /// LARS was computed for this group (enabled and not skipped).
    pub applied: bool,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub lr: f64,
    pub scales: Vec<GroupScale>,
}

impl StepReport {
    /// Min, median and max of λ over groups LARS was applied to; all 1 when
    /// none were.
    pub fn lambda_summary(&self) -> (f64, f64, f64) {
        let mut v: Vec<f64> = self.scales.iter().filter(|s| s.applied).map(|s| s.lambda).collect();
        if v.is_empty() {
            return (1.0, 1.0, 1.0);
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        (v[0], median, v[n - 1])
    }
}

/// One update at the scheduled rate; advances `st` on success.
pub fn sgd_step(params: &mut ParamSet, hp: &HyperParams, st: &mut ScheduleState) -> Result<StepReport, OptimError> {
    let lr = scheduled_lr(hp, st)?;
    let report = step_with_lr(params, hp, lr, st.iteration)?;
    st.iteration += 1;
    Ok(report)
}

/// One update at an explicit global rate. `params` is left untouched if any
/// group's update would be non-finite.
pub fn step_with_lr(
    params: &mut ParamSet,
    hp: &HyperParams,
    lr: f64,
    iteration: u64,
) -> Result<StepReport, OptimError> {
    let mut scales = Vec::with_capacity(params.groups.len());
    let mut staged = Vec::with_capacity(params.groups.len());
    for group in &params.groups {
        let scale = group_scale(group, hp)?;
        let rate = scale.lambda * lr;
        let w = group.param.data();
        let mut velocity = group.momentum.data().to_vec();
        let mut next = w.to_vec();
        for (((v, p), &wi), &gi) in velocity.iter_mut().zip(next.iter_mut()).zip(w).zip(group.grad.data()) {
            let g = gi + hp.weight_decay * wi;
            *v = hp.momentum * *v + rate * g;
            *p = wi - *v;
        }
        if !next.iter().chain(&velocity).all(|x| x.is_finite()) {
            return Err(OptimError::Divergence {
                iteration,
                group: group.name.clone(),
            });
        }
        staged.push((next, velocity));
        scales.push(scale);
    }
    for (group, (next, velocity)) in params.groups.iter_mut().zip(staged) {
        group.param.data_mut().copy_from_slice(&next);
        group.momentum.data_mut().copy_from_slice(&velocity);
    }
    Ok(StepReport { iteration, lr, scales })
}
