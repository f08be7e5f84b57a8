//! Inverse distillation: alternating fake-model and student updates.
//!
//! The student maps a noised data sample `(x_t̃, t̃)` to simplex rows that are
//! treated as relaxed clean data. The fake model is fit to those rows; the
//! student then lowers the teacher's loss relative to the fake's on shared
//! inner draws.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::duo::duo_draw;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, ModelRef, Objective};
use crate::model::{ema_update, BoundParams, DenoiserParams, ModelInput};
use crate::optim::{adamw_step, AdamWConfig, Moments};
use crate::process::DiffusionProcess;
use crate::train::{grad_norm, step_rng, DataSource, Phase};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub fake: AdamWConfig,
    pub student: AdamWConfig,
    pub ema_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { fake: AdamWConfig::default(), student: AdamWConfig::default(), ema_decay: 0.999 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.fake.validate()?;
        self.student.validate()?;
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch: usize,
    pub seed: u64,
    /// Fake updates before each student update.
    pub fake_updates: usize,
}

impl DistillConfig {
    pub fn new(loss: LossConfig) -> Self {
        Self { loss, optimizer: OptimizerConfig::default(), batch: 16, seed: 0, fake_updates: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch == 0 || self.fake_updates == 0 {
            return Err(Error::Config("batch and fake updates per step must be positive".into()));
        }
        Ok(())
    }
}

/// Conditioning input of the student for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentInput {
    pub batch: usize,
    pub length: usize,
    /// Noisy tokens (the hard argmax for relaxed inputs).
    pub tokens: Vec<usize>,
    /// `t̃` per sequence.
    pub times: Vec<f64>,
    /// Relaxed rows `[batch·L, N]` for the relaxed loss.
    pub soft: Option<Vec<f64>>,
}

/// Draws `x̃0` from data, `t̃ ~ U[0, 1)` and `x_t̃ ~ p_{t̃|0}(·|x̃0)`.
pub fn sampling_func<R: Rng + ?Sized>(
    source: &DataSource,
    objective: &Objective,
    batch: usize,
    rng: &mut R,
) -> Result<StudentInput> {
    let process = &objective.process;
    let length = source.length();
    let clean = source.sample_batch(batch, rng)?;
    let n = process.vocab();
    let mut tokens = Vec::with_capacity(clean.len());
    let mut times = Vec::with_capacity(batch);
    let mut soft = objective.duo_map().map(|_| Vec::with_capacity(clean.len() * n));
    for seq in clean.chunks(length) {
        let t: f64 = rng.gen();
        times.push(t);
        match (objective.duo_map(), soft.as_mut()) {
            (Some(map), Some(rows)) => {
                let at = map.alpha_tilde(process.alpha(t)?)?;
                for &x in seq {
                    let mut e = vec![0.0; n];
                    e[x] = 1.0;
                    let d = duo_draw(&e, at, objective.config.tau, rng)?;
                    tokens.push(d.hard);
                    rows.extend(d.soft);
                }
            }
            _ => {
                for &x in seq {
                    tokens.push(process.sample_xt(t, x, rng)?);
                }
            }
        }
    }
    Ok(StudentInput { batch, length, tokens, times, soft })
}

/// Student output as relaxed clean rows `[batch·L, N]`.
pub fn student_forward_as_data(tape: &mut Tape, student: &DenoiserParams, bound: &BoundParams, input: &StudentInput) -> Result<Var> {
    let n = student.config.vocab;
    match &input.soft {
        Some(rows) => {
            let x = tape.constant(rows.clone(), &[rows.len() / n, n])?;
            student.forward_simplex(tape, bound, ModelInput::Simplex(x), &input.times)
        }
        None => student.forward_simplex(tape, bound, ModelInput::Tokens(&input.tokens), &input.times),
    }
}

/// Frozen teacher, trained fake and student, with optimizer and EMA state.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub teacher: DenoiserParams,
    pub fake: DenoiserParams,
    pub student: DenoiserParams,
    pub fake_moments: Moments,
    pub student_moments: Moments,
    pub student_ema: DenoiserParams,
    /// Completed distillation steps.
    pub step: u64,
}

impl DistillState {
    /// Fake and student both start as copies of the teacher.
    pub fn new(teacher: DenoiserParams) -> Self {
        Self {
            fake_moments: Moments::zeros(&teacher),
            student_moments: Moments::zeros(&teacher),
            fake: teacher.clone(),
            student: teacher.clone(),
            student_ema: teacher.clone(),
            teacher,
            step: 0,
        }
    }

    pub fn check(&self, objective: &Objective) -> Result<()> {
        let want = objective.kind().parameterization();
        for (name, p) in [("teacher", &self.teacher), ("fake", &self.fake), ("student", &self.student)] {
            if p.parameterization != want {
                return Err(Error::Config(format!(
                    "{name} is {} but {} needs {}",
                    p.parameterization.name(),
                    objective.kind().name(),
                    want.name()
                )));
            }
            if !p.compatible_with(&self.teacher) {
                return Err(Error::Config(format!("{name} differs in shape from the teacher")));
            }
            if p.config.vocab != objective.process.vocab() {
                return Err(Error::Config(format!("{name} vocabulary differs from the process")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Fits the fake to detached student outputs; the student is untouched.
pub fn fake_update<R: Rng + ?Sized>(
    state: &mut DistillState,
    objective: &Objective,
    opt: &AdamWConfig,
    input: &StudentInput,
    rng: &mut R,
) -> Result<UpdateReport> {
    let mut tape = Tape::new();
    let student = state.student.bind(&mut tape, false)?;
    let x0 = student_forward_as_data(&mut tape, &state.student, &student, input)?;
    let x0 = tape.detach(x0)?;
    let fake = state.fake.bind(&mut tape, true)?;
    let loss = objective.loss(&mut tape, ModelRef { params: &state.fake, bound: &fake }, x0, input.length, rng)?;
    let value = finite(tape.scalar(loss), "fake")?;
    let grads = tape.backward(loss)?;
    let g: Vec<Vec<f64>> = fake.vars.iter().map(|&v| grads.wrt(v)).collect();
    adamw_step(&mut state.fake, &g, &mut state.fake_moments, opt)?;
    Ok(UpdateReport { loss: value, grad_norm: grad_norm(&g) })
}

/// `L(teacher, G(x_t̃)) − L(fake, G(x_t̃))` on shared inner draws, backpropagated into the student.
pub fn student_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    state: &DistillState,
    student: &BoundParams,
    objective: &Objective,
    input: &StudentInput,
    rng: &mut R,
) -> Result<Var> {
    let x0 = student_forward_as_data(tape, &state.student, student, input)?;
    let teacher = state.teacher.bind(tape, false)?;
    let fake = state.fake.bind(tape, false)?;
    let draws = objective.draw(tape.value(x0), input.batch, input.length, rng)?;
    let models = [
        ModelRef { params: &state.teacher, bound: &teacher },
        ModelRef { params: &state.fake, bound: &fake },
    ];
    let losses = objective.evaluate(tape, x0, &draws, &models)?;
    tape.sub(losses[0], losses[1])
}

/// One student step followed by the EMA update; teacher and fake are untouched.
pub fn student_update<R: Rng + ?Sized>(
    state: &mut DistillState,
    objective: &Objective,
    opt: &OptimizerConfig,
    input: &StudentInput,
    rng: &mut R,
) -> Result<UpdateReport> {
    let mut tape = Tape::new();
    let student = state.student.bind(&mut tape, true)?;
    let diff = student_objective(&mut tape, state, &student, objective, input, rng)?;
    let value = finite(tape.scalar(diff), "student")?;
    let grads = tape.backward(diff)?;
    let g: Vec<Vec<f64>> = student.vars.iter().map(|&v| grads.wrt(v)).collect();
    adamw_step(&mut state.student, &g, &mut state.student_moments, &opt.student)?;
    ema_update(&mut state.student_ema, &state.student, opt.ema_decay)?;
    Ok(UpdateReport { loss: value, grad_norm: grad_norm(&g) })
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} loss is {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub fake: UpdateReport,
    pub student: UpdateReport,
}

/// One alternation: `fake_updates` fake steps, then one student step, each on a fresh batch.
pub fn distill_step(state: &mut DistillState, objective: &Objective, config: &DistillConfig, source: &DataSource) -> Result<StepReport> {
    let step = state.step;
    let mut fake = UpdateReport { loss: 0.0, grad_norm: 0.0 };
    for k in 0..config.fake_updates {
        let mut rng = step_rng(config.seed, step * config.fake_updates as u64 + k as u64, Phase::Fake);
        let input = sampling_func(source, objective, config.batch, &mut rng)?;
        fake = fake_update(state, objective, &config.optimizer.fake, &input, &mut rng)?;
    }
    let mut rng = step_rng(config.seed, step, Phase::Student);
    let input = sampling_func(source, objective, config.batch, &mut rng)?;
    let student = student_update(state, objective, &config.optimizer, &input, &mut rng)?;
    state.step += 1;
    Ok(StepReport { step, fake, student })
}

/// Runs alternations until `state.step == until`, reporting each one.
///
/// Every step draws from generators keyed by `(seed, step)`, so a run resumed
/// from a saved state continues exactly as the uninterrupted run.
pub fn run_distillation(
    state: &mut DistillState,
    process: &DiffusionProcess,
    config: &DistillConfig,
    source: &DataSource,
    until: u64,
    mut on_step: impl FnMut(&DistillState, &StepReport) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    let objective = Objective::new(config.loss.clone(), process.clone())?;
    state.check(&objective)?;
    if source.length() != state.teacher.config.length {
        return Err(Error::Config(format!(
            "data length {} differs from model length {}",
            source.length(),
            state.teacher.config.length
        )));
    }
    while state.step < until {
        let report = distill_step(state, &objective, config, source)?;
        on_step(state, &report)?;
    }
    Ok(())
}

