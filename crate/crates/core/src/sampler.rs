//! Reverse-time generation on a uniform time grid `t_k = 1 − k/steps`.

use rand::Rng;

use crate::duo::argmax;
use crate::error::{Error, Result};
use crate::model::{DenoiserParams, Parameterization};
use crate::process::{sample_categorical, DiffusionProcess, ProcessKind};

/// Off-state mass allowed per Euler step before rescaling.
pub const EULER_CLIP: f64 = 1.0 - 1e-6;
const PREDICT_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    EulerScore,
    AncestralAbsorbing,
    AncestralUniform,
    GreedyTail,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] =
        [SamplerKind::EulerScore, SamplerKind::AncestralAbsorbing, SamplerKind::AncestralUniform, SamplerKind::GreedyTail];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::EulerScore => "euler-score",
            SamplerKind::AncestralAbsorbing => "ancestral-absorbing",
            SamplerKind::AncestralUniform => "ancestral-uniform",
            SamplerKind::GreedyTail => "greedy-tail",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler '{s}'")))
    }

    /// Output the sampler consumes.
    pub fn needs(self) -> OutputKind {
        match self {
            SamplerKind::EulerScore => OutputKind::Score,
            _ => OutputKind::Clean,
        }
    }

    pub fn check_process(self, process: ProcessKind) -> Result<()> {
        match (self, process) {
            (SamplerKind::AncestralAbsorbing, ProcessKind::Uniform) => {
                Err(Error::Config("ancestral-absorbing needs the absorbing process".into()))
            }
            (SamplerKind::AncestralUniform | SamplerKind::GreedyTail, ProcessKind::Absorbing) => {
                Err(Error::Config(format!("{} needs the uniform process", self.name())))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        Ok(())
    }

    /// `(t_k, t_{k+1})` pairs; the last target is exactly 0.
    pub fn grid(&self) -> Vec<(f64, f64)> {
        let n = self.steps as f64;
        (0..self.steps)
            .map(|k| {
                let t = 1.0 - k as f64 / n;
                let s = if k + 1 == self.steps { 0.0 } else { 1.0 - (k + 1) as f64 / n };
                (t, s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    /// Rows are distributions over clean tokens.
    Clean,
    /// Rows are positive concrete-score estimates.
    Score,
}

/// A denoiser queried on flat token batches at one time; returns `[rows, N]`.
pub trait Denoiser {
    fn output_kind(&self) -> OutputKind;
    /// False when outputs do not depend on `t`.
    fn time_dependent(&self) -> bool {
        true
    }
    fn predict(&self, tokens: &[usize], length: usize, t: f64) -> Result<Vec<f64>>;
}

/// A network read either through its own head or as a clean-data generator.
#[derive(Debug, Clone, Copy)]
pub struct NetworkDenoiser<'a> {
    pub params: &'a DenoiserParams,
    pub clean_view: bool,
}

impl<'a> NetworkDenoiser<'a> {
    pub fn native(params: &'a DenoiserParams) -> Self {
        Self { params, clean_view: false }
    }

    pub fn clean(params: &'a DenoiserParams) -> Self {
        Self { params, clean_view: true }
    }
}

impl Denoiser for NetworkDenoiser<'_> {
    fn output_kind(&self) -> OutputKind {
        if self.clean_view || self.params.parameterization != Parameterization::Score {
            OutputKind::Clean
        } else {
            OutputKind::Score
        }
    }

    fn time_dependent(&self) -> bool {
        self.params.config.time_conditioning
    }

    fn predict(&self, tokens: &[usize], length: usize, t: f64) -> Result<Vec<f64>> {
        if length != self.params.config.length || !tokens.len().is_multiple_of(length) {
            return Err(Error::Shape(format!("{} tokens for model length {}", tokens.len(), self.params.config.length)));
        }
        let mut out = Vec::with_capacity(tokens.len() * self.params.config.vocab);
        for chunk in tokens.chunks(PREDICT_CHUNK * length) {
            let times = vec![t; chunk.len() / length];
            let v = if self.clean_view {
                self.params.predict_simplex(chunk, &times)?
            } else {
                self.params.predict_tokens(chunk, &times)?
            };
            out.extend(v);
        }
        Ok(out)
    }
}

/// Plug-in scores `p_{t|0}(y|x̂0)/p_{t|0}(x|x̂0)` from a clean-output denoiser.
pub struct PlugInScore<'a, D: Denoiser + ?Sized> {
    pub inner: &'a D,
    pub process: &'a DiffusionProcess,
}

impl<D: Denoiser + ?Sized> Denoiser for PlugInScore<'_, D> {
    fn output_kind(&self) -> OutputKind {
        OutputKind::Score
    }

    fn time_dependent(&self) -> bool {
        true
    }

    fn predict(&self, tokens: &[usize], length: usize, t: f64) -> Result<Vec<f64>> {
        let clean = self.inner.predict(tokens, length, t)?;
        let n = self.process.vocab();
        let alpha = self.process.alpha(t)?;
        let mut out = vec![0.0; clean.len()];
        for (r, &x) in tokens.iter().enumerate() {
            let row = &mut out[r * n..(r + 1) * n];
            self.process.conditional_probs_into(alpha, &clean[r * n..(r + 1) * n], row);
            let a = row[x];
            if !(a > 0.0) {
                return Err(Error::UnreachableState(format!("token {x} has zero probability under the denoiser")));
            }
            row.iter_mut().for_each(|v| *v /= a);
        }
        Ok(out)
    }
}

fn order(process: &DiffusionProcess, t: f64, s: f64) -> Result<(f64, f64)> {
    if s > t {
        return Err(Error::ScheduleOrder { s, t });
    }
    let (at, as_) = (process.alpha(t)?, process.alpha(s)?);
    if as_ < at {
        return Err(Error::ScheduleOrder { s, t });
    }
    Ok((at, as_))
}

/// Probability that a masked position stays masked from `t` to `s`.
pub fn stay_masked_probability(alpha_t: f64, alpha_s: f64) -> f64 {
    if alpha_t >= 1.0 {
        return 0.0;
    }
    ((1.0 - alpha_s) / (1.0 - alpha_t)).clamp(0.0, 1.0)
}

/// One ancestral unmasking step over flat tokens with `x̂0` rows.
pub fn ancestral_absorbing_step<R: Rng + ?Sized>(
    process: &DiffusionProcess,
    x0_hat: &[f64],
    x: &mut [usize],
    t: f64,
    s: f64,
    rng: &mut R,
) -> Result<()> {
    let m = process.mask().ok_or_else(|| Error::Config("absorbing step needs a mask".into()))?;
    let n = process.vocab();
    let (at, as_) = order(process, t, s)?;
    let stay = stay_masked_probability(at, as_);
    let mut probs = vec![0.0; n];
    for (r, xi) in x.iter_mut().enumerate() {
        if *xi != m || stay >= 1.0 {
            continue;
        }
        if rng.gen::<f64>() < stay {
            continue;
        }
        probs.copy_from_slice(&x0_hat[r * n..(r + 1) * n]);
        probs[m] = 0.0;
        let z: f64 = probs.iter().sum();
        if !(z > 0.0) {
            return Err(Error::Numeric(format!("denoiser row {r} has no mass off the mask")));
        }
        *xi = sample_categorical(&probs, rng);
    }
    Ok(())
}

/// `q(x_s | x_t, x̂0) ∝ p_{t|s}(x_t|x_s)·p_{s|0}(x_s|x̂0)` for the uniform process.
pub fn uniform_posterior_into(process: &DiffusionProcess, x0_hat: &[f64], x_t: usize, alpha_t: f64, alpha_s: f64, out: &mut [f64]) -> Result<()> {
    let n = process.vocab() as f64;
    let ats = if alpha_s > 0.0 { alpha_t / alpha_s } else { 1.0 };
    if !(0.0..=1.0 + 1e-12).contains(&ats) {
        return Err(Error::ScheduleOrder { s: alpha_s, t: alpha_t });
    }
    process.conditional_probs_into(alpha_s, x0_hat, out);
    let off = (1.0 - ats) / n;
    for (y, o) in out.iter_mut().enumerate() {
        let fwd = if y == x_t { ats + off } else { off };
        *o *= fwd;
    }
    let z: f64 = out.iter().sum();
    if !(z > 0.0) {
        return Err(Error::Numeric("reverse kernel has no mass".into()));
    }
    out.iter_mut().for_each(|v| *v /= z);
    Ok(())
}

/// One ancestral step for the uniform process; `greedy` replaces `x̂0` by its argmax.
pub fn ancestral_uniform_step<R: Rng + ?Sized>(
    process: &DiffusionProcess,
    x0_hat: &[f64],
    x: &mut [usize],
    t: f64,
    s: f64,
    greedy: bool,
    rng: &mut R,
) -> Result<()> {
    let n = process.vocab();
    let (at, as_) = order(process, t, s)?;
    let mut probs = vec![0.0; n];
    let mut hot = vec![0.0; n];
    for (r, xi) in x.iter_mut().enumerate() {
        let row = &x0_hat[r * n..(r + 1) * n];
        let row = if greedy {
            hot.iter_mut().for_each(|v| *v = 0.0);
            hot[argmax(row)] = 1.0;
            &hot[..]
        } else {
            row
        };
        uniform_posterior_into(process, row, *xi, at, as_, &mut probs)?;
        *xi = sample_categorical(&probs, rng);
    }
    Ok(())
}

/// One Euler step of the reverse chain from score rows; returns the number of clipped positions.
pub fn euler_score_step<R: Rng + ?Sized>(
    process: &DiffusionProcess,
    scores: &[f64],
    x: &mut [usize],
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(dt >= 0.0) || dt > t {
        return Err(Error::ScheduleOrder { s: t - dt, t });
    }
    let n = process.vocab();
    let tp = process.at(t)?;
    let mut probs = vec![0.0; n];
    let mut clipped = 0;
    for (r, xi) in x.iter_mut().enumerate() {
        let cur = *xi;
        let mut off = 0.0;
        for y in 0..n {
            probs[y] = if y == cur { 0.0 } else { dt * process.forward_rate(&tp, cur, y) * scores[r * n + y] };
            if !(probs[y] >= 0.0) || !probs[y].is_finite() {
                return Err(Error::Numeric(format!("invalid transition mass {} at row {r}", probs[y])));
            }
            off += probs[y];
        }
        if off > EULER_CLIP {
            clipped += 1;
            let scale = EULER_CLIP / off;
            probs.iter_mut().for_each(|p| *p *= scale);
            off = EULER_CLIP;
        }
        probs[cur] = 1.0 - off;
        *xi = sample_categorical(&probs, rng);
    }
    Ok(clipped)
}

/// Sequences plus Euler clipping counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub length: usize,
    pub tokens: Vec<usize>,
    pub clipped: usize,
    pub euler_moves: usize,
}

impl Generated {
    pub fn sequences(&self) -> impl Iterator<Item = &[usize]> {
        self.tokens.chunks(self.length.max(1))
    }

    pub fn clip_rate(&self) -> f64 {
        if self.euler_moves == 0 {
            0.0
        } else {
            self.clipped as f64 / self.euler_moves as f64
        }
    }
}

/// Initial state `x_1 ~ π`.
pub fn initial_state<R: Rng + ?Sized>(process: &DiffusionProcess, count: usize, length: usize, rng: &mut R) -> Vec<usize> {
    match process.mask() {
        Some(m) => vec![m; count * length],
        None => (0..count * length).map(|_| rng.gen_range(0..process.vocab())).collect(),
    }
}

/// Runs `steps` reverse steps from the stationary law.
pub fn generate<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    process: &DiffusionProcess,
    config: &SamplerConfig,
    count: usize,
    length: usize,
    rng: &mut R,
) -> Result<Generated> {
    config.validate()?;
    config.kind.check_process(process.kind())?;
    if model.output_kind() != config.kind.needs() {
        return Err(Error::Config(format!("{} sampler cannot use this model output", config.kind.name())));
    }
    let mut x = initial_state(process, count, length, rng);
    let mut gen = Generated { length, tokens: vec![], clipped: 0, euler_moves: 0 };
    if count == 0 {
        return Ok(gen);
    }
    let mask = process.mask();
    let mut last_scores: Option<(f64, Vec<f64>)> = None;
    for (t, s) in config.grid() {
        if mask.is_some_and(|m| !x.contains(&m)) {
            break;
        }
        let out = model.predict(&x, length, t)?;
        match config.kind {
            SamplerKind::AncestralAbsorbing => ancestral_absorbing_step(process, &out, &mut x, t, s, rng)?,
            SamplerKind::AncestralUniform => ancestral_uniform_step(process, &out, &mut x, t, s, false, rng)?,
            SamplerKind::GreedyTail => ancestral_uniform_step(process, &out, &mut x, t, s, true, rng)?,
            SamplerKind::EulerScore => {
                gen.clipped += euler_score_step(process, &out, &mut x, t, t - s, rng)?;
                gen.euler_moves += x.len();
                last_scores = Some((t, out));
            }
        }
    }
    if let (Some(m), Some((_, scores))) = (mask, last_scores) {
        fill_masks(&mut x, &scores, m, process.vocab(), rng)?;
    }
    gen.tokens = x;
    Ok(gen)
}

/// Replaces masks left after the last Euler step by draws from the normalized scores.
fn fill_masks<R: Rng + ?Sized>(x: &mut [usize], scores: &[f64], m: usize, n: usize, rng: &mut R) -> Result<()> {
    let mut probs = vec![0.0; n];
    for (r, xi) in x.iter_mut().enumerate() {
        if *xi != m {
            continue;
        }
        probs.copy_from_slice(&scores[r * n..(r + 1) * n]);
        probs[m] = 0.0;
        if !(probs.iter().sum::<f64>() > 0.0) {
            return Err(Error::Numeric(format!("no score mass off the mask at row {r}")));
        }
        *xi = sample_categorical(&probs, rng);
    }
    Ok(())
}

/// Multistep generation with a distilled network read as a clean-data generator.
pub fn student_generate<R: Rng + ?Sized>(
    student: &DenoiserParams,
    process: &DiffusionProcess,
    config: &SamplerConfig,
    count: usize,
    rng: &mut R,
) -> Result<Generated> {
    let net = NetworkDenoiser::clean(student);
    let length = student.config.length;
    match config.kind.needs() {
        OutputKind::Clean => generate(&net, process, config, count, length, rng),
        OutputKind::Score => generate(&PlugInScore { inner: &net, process }, process, config, count, length, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::NoiseSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_ends_at_zero() {
        let c = SamplerConfig { kind: SamplerKind::AncestralAbsorbing, steps: 3, seed: 0 };
        let g = c.grid();
        assert_eq!(g[0].0, 1.0);
        assert_eq!(g[2].1, 0.0);
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn absorbing_step_edge_cases() {
        let p = DiffusionProcess::absorbing(3, NoiseSchedule::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0_hat = [0.5, 0.5, 0.0, 0.2, 0.8, 0.0];
        let mut x = vec![2, 1];
        ancestral_absorbing_step(&p, &x0_hat, &mut x, 0.5, 0.5, &mut rng).unwrap();
        assert_eq!(x, vec![2, 1]);
        ancestral_absorbing_step(&p, &x0_hat, &mut x, 0.5, 0.0, &mut rng).unwrap();
        assert_ne!(x[0], 2);
        assert_eq!(x[1], 1);
        assert!(matches!(ancestral_absorbing_step(&p, &x0_hat, &mut x, 0.2, 0.5, &mut rng), Err(Error::ScheduleOrder { .. })));
    }

    #[test]
    fn uniform_step_edge_cases() {
        let p = DiffusionProcess::uniform(3, NoiseSchedule::default()).unwrap();
        let mut out = vec![0.0; 3];
        uniform_posterior_into(&p, &[0.2, 0.3, 0.5], 1, 0.4, 0.4, &mut out).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0]);
        uniform_posterior_into(&p, &[0.0, 0.0, 1.0], 1, 0.4, 1.0, &mut out).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn euler_zero_scores_keep_state() {
        let p = DiffusionProcess::absorbing(3, NoiseSchedule::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = vec![2, 0, 2];
        let scores = vec![0.0; 9];
        assert_eq!(euler_score_step(&p, &scores, &mut x, 0.5, 0.25, &mut rng).unwrap(), 0);
        assert_eq!(x, vec![2, 0, 2]);
        let big = vec![1e9; 9];
        let clipped = euler_score_step(&p, &big, &mut x, 0.5, 0.25, &mut rng).unwrap();
        assert_eq!(clipped, 2);
    }
}
