//! AdamW with linear warmup and decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::DenoiserParams;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, warmup_steps: 100 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be a finite non-negative number", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate after linear warmup; 0 at step 0 when warmup is positive.
    pub fn effective_lr(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// First and second moments per tensor plus the count of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Moments {
    pub fn zeros(params: &DenoiserParams) -> Self {
        let z: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self { step: 0, m: z.clone(), v: z }
    }
}

/// One AdamW step on flat slices.
pub fn adamw_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], cfg: &AdamWConfig, step: u64) -> Result<()> {
    if params.len() != grads.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Shape(format!(
            "params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    let lr = cfg.effective_lr(step);
    let k = (step + 1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(k);
    let c2 = 1.0 - cfg.beta2.powi(k);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

/// One AdamW step over every tensor of a model; advances `moments.step`.
pub fn adamw_step(params: &mut DenoiserParams, grads: &[Vec<f64>], moments: &mut Moments, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != params.tensors.len() || moments.m.len() != params.tensors.len() {
        return Err(Error::Shape(format!("{} gradient tensors for {} parameters", grads.len(), params.tensors.len())));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    for (i, t) in params.tensors.iter_mut().enumerate() {
        adamw_update(&mut t.data, &grads[i], &mut moments.m[i], &mut moments.v[i], cfg, moments.step)?;
    }
    moments.step += 1;
    Ok(())
}
