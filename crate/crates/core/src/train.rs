//! Clean-data sources and single-model training steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::loss::{ModelRef, Objective};
use crate::model::{ema_update, DenoiserParams};
use crate::optim::{adamw_step, AdamWConfig, Moments};
use crate::oracle::ToyDistribution;

/// Stream ids that keep the random draws of different phases disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Teacher = 0,
    Fake = 1,
    Student = 2,
    Sample = 3,
}

/// Generator for one phase of one step; independent of every other step.
pub fn step_rng(seed: u64, step: u64, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(4).wrapping_add(phase as u64));
    rng
}

/// Clean sequences: a fixed corpus of windows or an explicit distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Windows { length: usize, tokens: Vec<usize> },
    Toy(ToyDistribution),
}

impl DataSource {
    pub fn windows(length: usize, tokens: Vec<usize>) -> Result<Self> {
        if length == 0 || !tokens.len().is_multiple_of(length) {
            return Err(Error::Data(format!("{} tokens do not split into windows of {length}", tokens.len())));
        }
        Ok(DataSource::Windows { length, tokens })
    }

    pub fn length(&self) -> usize {
        match self {
            DataSource::Windows { length, .. } => *length,
            DataSource::Toy(d) => d.length(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DataSource::Windows { length, tokens } => tokens.len() / length,
            DataSource::Toy(d) => d.size(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `batch` sequences, flat.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let mut out = Vec::with_capacity(batch * self.length());
        for _ in 0..batch {
            match self {
                DataSource::Windows { length, tokens } => {
                    let i = rng.gen_range(0..tokens.len() / length);
                    out.extend_from_slice(&tokens[i * length..(i + 1) * length]);
                }
                DataSource::Toy(d) => out.extend(d.sample(rng)),
            }
        }
        Ok(out)
    }
}

/// Squared-sum norm over all gradient tensors.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Weights, optimizer moments and EMA shadow of a single trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub moments: Moments,
    pub ema: DenoiserParams,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: DenoiserParams) -> Self {
        Self { moments: Moments::zeros(&params), ema: params.clone(), params, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimizer step of `objective` on a fresh data batch.
pub fn train_step(
    state: &mut TrainState,
    objective: &Objective,
    opt: &AdamWConfig,
    ema_decay: f64,
    source: &DataSource,
    batch: usize,
    seed: u64,
) -> Result<TrainReport> {
    let mut rng = step_rng(seed, state.step, Phase::Teacher);
    let tokens = source.sample_batch(batch, &mut rng)?;
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, true)?;
    let model = ModelRef { params: &state.params, bound: &bound };
    let loss = objective.data_loss(&mut tape, model, &tokens, source.length(), &mut rng)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss {value} at step {}", state.step)));
    }
    let grads = tape.backward(loss)?;
    let g: Vec<Vec<f64>> = bound.vars.iter().map(|&v| grads.wrt(v)).collect();
    let norm = grad_norm(&g);
    adamw_step(&mut state.params, &g, &mut state.moments, opt)?;
    ema_update(&mut state.ema, &state.params, ema_decay)?;
    let report = TrainReport { step: state.step, loss: value, grad_norm: norm };
    state.step += 1;
    Ok(report)
}
