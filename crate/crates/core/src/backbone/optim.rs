use log::warn;
use serde::{Deserialize, Serialize};

use super::ModelParams;

/// Polynomial learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub power: f32,
    pub max_iter: usize,
    /// Use `base * (1 - (iter / max_iter)^power)` instead of the usual
    /// `base * (1 - iter / max_iter)^power`.
    #[serde(default)]
    pub literal: bool,
}

/// Learning rate at `iter`; zero at and beyond `max_iter`.
pub fn poly_lr(iter: usize, sched: &LrSchedule) -> f32 {
    if sched.max_iter == 0 || iter >= sched.max_iter {
        return if iter == 0 && sched.max_iter == 0 { sched.base_lr } else { 0.0 };
    }
    let t = iter as f64 / sched.max_iter as f64;
    let factor = if sched.literal {
        1.0 - t.powf(sched.power as f64)
    } else {
        (1.0 - t).powf(sched.power as f64)
    };
    (sched.base_lr as f64 * factor) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

/// SGD with heavy-ball momentum: `v <- mu * v + g; p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub velocity: ModelParams,
}

impl Sgd {
    pub fn new(params: &ModelParams, momentum: f32) -> Self {
        Self {
            momentum,
            velocity: ModelParams::zeros(params.shape),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f32) -> StepOutcome {
        if !grads.all_finite() {
            warn!("non-finite gradient, optimizer step skipped");
            return StepOutcome::SkippedNonFinite;
        }
        let mu = self.momentum;
        for ((p, v), g) in params
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(grads.tensors())
        {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        StepOutcome::Applied
    }
}

/// `teacher <- decay * teacher + (1 - decay) * student`.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, decay: f32) {
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (t, s) in t.iter_mut().zip(s.iter()) {
            *t = decay * *t + (1.0 - decay) * s;
        }
    }
}
