//! Adam with linear warmup followed by cosine decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
    pub cosine: bool,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).ceil() as u64
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            return self.peak_lr * step as f64 / w as f64;
        }
        if !self.cosine {
            return self.peak_lr;
        }
        let span = self.total_steps.saturating_sub(w).max(1) as f64;
        let progress = ((step - w) as f64 / span).min(1.0);
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(schedule: LrSchedule, params: &[Tensor]) -> Self {
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// Applies one update from each parameter's `grad` buffer. Every
    /// gradient is validated before any parameter is touched.
    pub fn step(&mut self, names: &[String], params: &mut [Tensor]) -> Result<f64> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Dimension {
                op: "optimizer_step",
                lhs: vec![params.len()],
                rhs: vec![self.first_moment.len()],
            });
        }
        for (k, p) in params.iter().enumerate() {
            let name = names.get(k).cloned().unwrap_or_else(|| format!("#{k}"));
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for `{name}`")))?;
            if g.len() != p.len() || self.first_moment[k].len() != p.len() {
                return Err(Error::Dimension {
                    op: "optimizer_step",
                    lhs: p.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: name, index });
            }
        }
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = p.grad.as_ref().expect("validated");
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}
