//! Diffusion training integrands and their sequence-level estimators.
//!
//! Scalar functions evaluate one position at one time and serve as references.
//! [`Objective`] evaluates the same integrands on a tape for whole batches,
//! with clean inputs that may be soft rows produced by another network.

use rand::distributions::Open01;
use rand::Rng;

use crate::autodiff::{Tape, Var, LOG_FLOOR};
use crate::duo::{argmax, gaussian_noise, DuoDraw, DuoMap, DEFAULT_RESOLUTION};
use crate::error::{Error, Result};
use crate::model::{BoundParams, DenoiserParams, ModelInput, Parameterization};
use crate::process::{sample_categorical, DiffusionProcess, ProcessKind, TimePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Sedd,
    Mdlm,
    Udlm,
    Duo,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Sedd, LossKind::Mdlm, LossKind::Udlm, LossKind::Duo];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Sedd => "sedd",
            LossKind::Mdlm => "mdlm",
            LossKind::Udlm => "udlm",
            LossKind::Duo => "duo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))
    }

    /// Model output each loss expects.
    pub fn parameterization(self) -> Parameterization {
        match self {
            LossKind::Sedd => Parameterization::Score,
            LossKind::Mdlm => Parameterization::X0Subs,
            LossKind::Udlm | LossKind::Duo => Parameterization::X0Duo,
        }
    }

    /// Rejects incompatible (loss, parameterization, process) triples.
    pub fn check(self, param: Parameterization, process: ProcessKind) -> Result<()> {
        if param != self.parameterization() {
            return Err(Error::Config(format!(
                "{} loss needs a {} model, got {}",
                self.name(),
                self.parameterization().name(),
                param.name()
            )));
        }
        match (self, process) {
            (LossKind::Mdlm, ProcessKind::Uniform) => Err(Error::Config("mdlm loss needs the absorbing process".into())),
            (LossKind::Udlm | LossKind::Duo, ProcessKind::Absorbing) => {
                Err(Error::Config(format!("{} loss needs the uniform process", self.name())))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Softmax temperature of the relaxed Duo input.
    pub tau: f64,
    /// Adds the model-free score-entropy term so the SEDD integrand is a Bregman divergence.
    pub include_constant: bool,
    /// Time draws per sequence, taken in antithetic pairs `(t, 1−t)`.
    pub n_time_samples: usize,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self { kind, tau: 0.05, include_constant: false, n_time_samples: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.n_time_samples == 0 {
            return Err(Error::Config("n_time_samples must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_vocab(process: &DiffusionProcess, v: &[f64], what: &str) -> Result<()> {
    if v.len() != process.vocab() {
        return Err(Error::Shape(format!("{what} of length {} for vocabulary {}", v.len(), process.vocab())));
    }
    Ok(())
}

fn check_token(process: &DiffusionProcess, x: usize) -> Result<()> {
    if x >= process.vocab() {
        return Err(Error::Domain(format!("token {x} outside vocabulary {}", process.vocab())));
    }
    Ok(())
}

/// `p_{t|0}(y|x0)/p_{t|0}(x_t|x0)` for every `y`.
pub fn conditional_score(process: &DiffusionProcess, alpha: f64, x_t: usize, x0: &[f64]) -> Result<Vec<f64>> {
    check_vocab(process, x0, "x0")?;
    check_token(process, x_t)?;
    let p = process.conditional_probs(alpha, x0);
    let a = p[x_t];
    if !(a > 0.0) {
        return Err(Error::UnreachableState(format!("x_t = {x_t} has zero probability given x0")));
    }
    Ok(p.iter().map(|v| v / a).collect())
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Score-entropy integrand with weights `σ_t Q[x_t][y]`.
pub fn sedd_integrand(
    process: &DiffusionProcess,
    tp: &TimePoint,
    x_t: usize,
    score_out: &[f64],
    x0: &[f64],
    include_constant: bool,
) -> Result<f64> {
    check_vocab(process, score_out, "score")?;
    let s = conditional_score(process, tp.alpha, x_t, x0)?;
    let mut total = 0.0;
    for y in 0..process.vocab() {
        let lam = process.forward_rate(tp, x_t, y);
        if y == x_t || lam == 0.0 {
            continue;
        }
        let sh = score_out[y];
        if sh == 0.0 && s[y] == 0.0 {
            continue;
        }
        if !(sh > 0.0) {
            return Err(Error::Domain(format!("non-positive score {sh} at token {y}")));
        }
        total += lam * (sh - s[y] * sh.ln());
        if include_constant {
            total += lam * (xlogx(s[y]) - s[y]);
        }
    }
    Ok(total)
}

/// Masked cross-entropy weighted by `−α'/(1−α)`; zero on unmasked positions.
pub fn mdlm_integrand(process: &DiffusionProcess, tp: &TimePoint, x_t: usize, x0_hat: &[f64], x0: &[f64]) -> Result<f64> {
    check_vocab(process, x0_hat, "x0_hat")?;
    check_vocab(process, x0, "x0")?;
    check_token(process, x_t)?;
    let m = process.mask().ok_or_else(|| Error::Config("mdlm integrand needs an absorbing process".into()))?;
    if x_t != m {
        return Ok(0.0);
    }
    let ce: f64 = x0.iter().zip(x0_hat).filter(|(&p, _)| p != 0.0).map(|(&p, &q)| -p * q.max(LOG_FLOOR).ln()).sum();
    Ok(tp.unmask_weight() * ce)
}

/// Uniform-state integrand: the rate-weighted divergence between reverse
/// rates implied by `x0` and by `x0_hat`.
///
/// `σ_t·(1/â − 1/a + Σ_{y≠x_t} (p_y/a)·log(â p_y/(p̂_y a)))` with `p = p_{t|0}(·|x0)`,
/// `p̂ = p_{t|0}(·|x0_hat)`, `a = p_{x_t}`, `â = p̂_{x_t}`.
pub fn udlm_g(process: &DiffusionProcess, tp: &TimePoint, x_t: usize, x0: &[f64], x0_hat: &[f64]) -> Result<f64> {
    check_vocab(process, x0_hat, "x0_hat")?;
    check_vocab(process, x0, "x0")?;
    check_token(process, x_t)?;
    if process.kind() != ProcessKind::Uniform {
        return Err(Error::Config("uniform-state integrand needs the uniform process".into()));
    }
    let p = process.conditional_probs(tp.alpha, x0);
    let ph = process.conditional_probs(tp.alpha, x0_hat);
    let (a, ah) = (p[x_t], ph[x_t]);
    if !(a > 0.0) || !(ah > 0.0) {
        return Err(Error::UnreachableState(format!("x_t = {x_t} has zero probability")));
    }
    let mut sum = 0.0;
    for y in 0..p.len() {
        if y == x_t || p[y] == 0.0 {
            continue;
        }
        if !(ph[y] > 0.0) {
            return Err(Error::UnreachableState(format!("token {y} has zero probability under x0_hat")));
        }
        sum += (p[y] / a) * ((ah * p[y]) / (ph[y] * a)).ln();
    }
    Ok(tp.sigma * (1.0 / ah - 1.0 / a + sum))
}

/// Uniform-state integrand at the hard token of a relaxed draw.
pub fn duo_integrand(process: &DiffusionProcess, tp: &TimePoint, draw: &DuoDraw, x0: &[f64], x0_hat: &[f64]) -> Result<f64> {
    udlm_g(process, tp, draw.hard, x0, x0_hat)
}

/// Dispatch on loss kind; `out` is the model output at `x_t`.
pub fn token_integrand(
    kind: LossKind,
    process: &DiffusionProcess,
    tp: &TimePoint,
    x_t: usize,
    out: &[f64],
    x0: &[f64],
    include_constant: bool,
) -> Result<f64> {
    match kind {
        LossKind::Sedd => sedd_integrand(process, tp, x_t, out, x0, include_constant),
        LossKind::Mdlm => mdlm_integrand(process, tp, x_t, out, x0),
        LossKind::Udlm | LossKind::Duo => udlm_g(process, tp, x_t, x0, out),
    }
}

/// One-hot rows for a flat token list.
pub fn one_hot_rows(tokens: &[usize], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; tokens.len() * n];
    for (r, &x) in tokens.iter().enumerate() {
        out[r * n + x] = 1.0;
    }
    out
}

/// Inner Monte Carlo draws for a batch, shared by every model evaluated on it.
///
/// Sequence `q = b·J + j` pairs batch element `b` with time draw `j`; row
/// `q·L + l` is position `l` of that sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerDraws {
    pub batch: usize,
    pub length: usize,
    pub n_time: usize,
    pub times: Vec<TimePoint>,
    /// Noisy token per row (the hard argmax for Duo).
    pub tokens: Vec<usize>,
    pub duo: Option<DuoNoise>,
}

/// Gaussian draws behind relaxed inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DuoNoise {
    /// `α̃` per sequence.
    pub alpha_tilde: Vec<f64>,
    /// Standard normal noise, `rows × N`.
    pub noise: Vec<f64>,
}

/// A model together with its weights on the current tape.
#[derive(Debug, Clone, Copy)]
pub struct ModelRef<'a> {
    pub params: &'a DenoiserParams,
    pub bound: &'a BoundParams,
}

/// A loss bound to a process.
#[derive(Debug, Clone)]
pub struct Objective {
    pub config: LossConfig,
    pub process: DiffusionProcess,
    duo: Option<DuoMap>,
}

impl Objective {
    pub fn new(config: LossConfig, process: DiffusionProcess) -> Result<Self> {
        config.validate()?;
        config.kind.check(config.kind.parameterization(), process.kind())?;
        let duo = match config.kind {
            LossKind::Duo => Some(DuoMap::new(process.vocab(), DEFAULT_RESOLUTION)?),
            _ => None,
        };
        Ok(Self { config, process, duo })
    }

    pub fn kind(&self) -> LossKind {
        self.config.kind
    }

    /// Rescaled-schedule map for the relaxed loss.
    pub fn duo_map(&self) -> Option<&DuoMap> {
        self.duo.as_ref()
    }

    /// Antithetic times in `(0, 1)`.
    fn draw_times<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.config.n_time_samples);
        for j in 0..self.config.n_time_samples {
            if j % 2 == 1 {
                out.push(1.0 - out[j - 1]);
            } else {
                out.push(rng.sample(Open01));
            }
        }
        out
    }

    /// Draws times and noisy inputs for `batch` clean sequences given as rows `[batch·L, N]`.
    pub fn draw<R: Rng + ?Sized>(&self, x0: &[f64], batch: usize, length: usize, rng: &mut R) -> Result<InnerDraws> {
        let n = self.process.vocab();
        if x0.len() != batch * length * n {
            return Err(Error::Shape(format!("{} clean values for {batch}×{length}×{n}", x0.len())));
        }
        let j_count = self.config.n_time_samples;
        let mut times = Vec::with_capacity(batch * j_count);
        let mut tokens = Vec::with_capacity(batch * j_count * length);
        let mut duo = self.duo.as_ref().map(|_| DuoNoise { alpha_tilde: vec![], noise: vec![] });
        let mut probs = vec![0.0; n];
        for b in 0..batch {
            for t in self.draw_times(rng) {
                let tp = self.process.at(t)?;
                times.push(tp);
                match (&self.duo, duo.as_mut()) {
                    (Some(map), Some(d)) => {
                        let at = map.alpha_tilde(tp.alpha)?;
                        let s = (1.0 - at * at).sqrt();
                        d.alpha_tilde.push(at);
                        for l in 0..length {
                            let row = &x0[(b * length + l) * n..(b * length + l + 1) * n];
                            let eps = gaussian_noise(n, rng);
                            let w: Vec<f64> = row.iter().zip(&eps).map(|(&x, &e)| at * x + s * e).collect();
                            tokens.push(argmax(&w));
                            d.noise.extend(eps);
                        }
                    }
                    _ => {
                        for l in 0..length {
                            let row = &x0[(b * length + l) * n..(b * length + l + 1) * n];
                            self.process.conditional_probs_into(tp.alpha, row, &mut probs);
                            tokens.push(sample_categorical(&probs, rng));
                        }
                    }
                }
            }
        }
        Ok(InnerDraws { batch, length, n_time: j_count, times, tokens, duo })
    }

    /// Sequence losses of every model on shared draws, one scalar per model.
    ///
    /// The integrand is built once over the row-stacked outputs of all models,
    /// so two models with identical outputs yield bitwise-equal losses and
    /// exactly opposite gradients in a difference of their losses.
    pub fn evaluate(&self, tape: &mut Tape, x0: Var, draws: &InnerDraws, models: &[ModelRef]) -> Result<Vec<Var>> {
        let n = self.process.vocab();
        let (l, j_count, batch) = (draws.length, draws.n_time, draws.batch);
        let seqs = batch * j_count;
        let rows = seqs * l;
        if models.is_empty() {
            return Ok(vec![]);
        }
        if tape.shape(x0) != [batch * l, n] {
            return Err(Error::Shape(format!("clean input {:?}, expected [{}, {n}]", tape.shape(x0), batch * l)));
        }
        if draws.tokens.len() != rows || draws.times.len() != seqs {
            return Err(Error::Shape("draws do not match the batch".into()));
        }
        let times: Vec<f64> = draws.times.iter().map(|tp| tp.t).collect();
        let x0_idx: Vec<usize> = (0..rows).map(|r| (r / l / j_count) * l + r % l).collect();

        let xr = tape.gather_rows(x0, &x0_idx)?;
        let mut outs = Vec::with_capacity(models.len());
        if self.config.kind == LossKind::Duo {
            let d = draws.duo.as_ref().ok_or_else(|| Error::Config("relaxed loss needs Gaussian draws".into()))?;
            let at: Vec<f64> = (0..rows).map(|r| d.alpha_tilde[r / l]).collect();
            let noise: Vec<f64> = (0..rows * n)
                .map(|i| {
                    let a = at[i / n];
                    (1.0 - a * a).sqrt() * d.noise[i]
                })
                .collect();
            let at = tape.constant(at, &[rows, 1])?;
            let noise = tape.constant(noise, &[rows, n])?;
            let w = tape.mul(xr, at)?;
            let w = tape.add(w, noise)?;
            let w = tape.scale(w, 1.0 / self.config.tau)?;
            let soft = tape.softmax(w)?;
            for m in models {
                outs.push(m.params.forward(tape, m.bound, ModelInput::Simplex(soft), &times)?);
            }
        } else {
            for m in models {
                outs.push(m.params.forward(tape, m.bound, ModelInput::Tokens(&draws.tokens), &times)?);
            }
        }
        let out = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };

        let stack = models.len() * rows;
        // Stack from the per-row gather so that the contributions of different
        // models to one row meet before rows repeated across time draws do.
        let x0s = if models.len() == 1 {
            xr
        } else {
            let idx: Vec<usize> = (0..stack).map(|r| r % rows).collect();
            tape.gather_rows(xr, &idx)?
        };
        let tok: Vec<usize> = (0..stack).map(|r| draws.tokens[r % rows]).collect();
        let tps: Vec<TimePoint> = (0..stack).map(|r| draws.times[(r % rows) / l]).collect();

        let per_row = match self.config.kind {
            LossKind::Mdlm => {
                let m = self.process.mask().ok_or_else(|| Error::Config("mdlm needs a mask".into()))?;
                let lg = tape.log(out)?;
                let ce = tape.mul(x0s, lg)?;
                let ce = tape.sum_rows(ce)?;
                let coef: Vec<f64> = (0..stack).map(|r| if tok[r] == m { -tps[r].unmask_weight() } else { 0.0 }).collect();
                let coef = tape.constant(coef, &[stack])?;
                tape.mul(ce, coef)?
            }
            LossKind::Sedd => {
                let s = self.score_rows(tape, x0s, &tok, &tps)?;
                self.bregman_rows(tape, out, s, &tok, &tps, self.config.include_constant)?
            }
            LossKind::Udlm | LossKind::Duo => {
                let s = self.score_rows(tape, x0s, &tok, &tps)?;
                let sh = self.score_rows(tape, out, &tok, &tps)?;
                self.bregman_rows(tape, sh, s, &tok, &tps, true)?
            }
        };

        let scale = 1.0 / seqs as f64;
        let mut losses = Vec::with_capacity(models.len());
        for k in 0..models.len() {
            let w: Vec<f64> = (0..stack).map(|r| if r / rows == k { scale } else { 0.0 }).collect();
            let w = tape.constant(w, &[stack])?;
            let v = tape.mul(per_row, w)?;
            losses.push(tape.sum(v)?);
        }
        Ok(losses)
    }

    /// `p_{t|0}(·|x)/p_{t|0}(x_t|x)` per row, on the tape.
    fn score_rows(&self, tape: &mut Tape, x: Var, tok: &[usize], tps: &[TimePoint]) -> Result<Var> {
        let n = self.process.vocab();
        let stack = tok.len();
        let pi = self.process.stationary();
        let spread: Vec<f64> = (0..stack * n).map(|i| pi[i % n]).collect();
        let spread = tape.constant(spread, &[stack, n])?;
        let alpha: Vec<f64> = (0..stack).map(|r| tps[r].alpha).collect();
        let rest: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
        let alpha = tape.constant(alpha, &[stack, 1])?;
        let rest = tape.constant(rest, &[stack, 1])?;
        let keep = tape.mul(x, alpha)?;
        // Row sums and products only: every row is computed by the same
        // sequence of operations wherever it sits in the stack.
        let mass = tape.sum_rows(x)?;
        let mass = tape.reshape(mass, &[stack, 1])?;
        let mass = tape.mul(mass, rest)?;
        let moved = tape.mul(spread, mass)?;
        let p = tape.add(keep, moved)?;
        let a = tape.pick_cols(p, tok)?;
        if let Some(r) = tape.value(a).iter().position(|&v| !(v > 0.0)) {
            return Err(Error::UnreachableState(format!("row {r}: token {} has zero probability", tok[r])));
        }
        let a = tape.reshape(a, &[stack, 1])?;
        tape.div(p, a)
    }

    /// `Σ_{y≠x_t} σ_t Q[x_t][y]·(ŝ_y − s_y log ŝ_y [+ s_y log s_y − s_y])` per row.
    fn bregman_rows(
        &self,
        tape: &mut Tape,
        sh: Var,
        s: Var,
        tok: &[usize],
        tps: &[TimePoint],
        include_constant: bool,
    ) -> Result<Var> {
        let n = self.process.vocab();
        let stack = tok.len();
        let mut lam = vec![0.0; stack * n];
        for r in 0..stack {
            for y in 0..n {
                if y != tok[r] {
                    lam[r * n + y] = self.process.forward_rate(&tps[r], tok[r], y);
                }
            }
        }
        if let Some(i) = (0..stack * n).find(|&i| lam[i] > 0.0 && !(tape.value(sh)[i] > 0.0)) {
            return Err(Error::Domain(format!("non-positive score {} in row {}", tape.value(sh)[i], i / n)));
        }
        let lam = tape.constant(lam, &[stack, n])?;
        let log_sh = tape.log(sh)?;
        let cross = tape.mul(s, log_sh)?;
        let mut e = tape.sub(sh, cross)?;
        if include_constant {
            let log_s = tape.log(s)?;
            let ent = tape.mul(s, log_s)?;
            let c = tape.sub(ent, s)?;
            e = tape.add(e, c)?;
        }
        let e = tape.mul(e, lam)?;
        tape.sum_rows(e)
    }

    /// Single-model sequence loss on fresh draws.
    pub fn loss<R: Rng + ?Sized>(&self, tape: &mut Tape, model: ModelRef, x0: Var, length: usize, rng: &mut R) -> Result<Var> {
        let batch = tape.shape(x0)[0] / length.max(1);
        let draws = self.draw(tape.value(x0), batch, length, rng)?;
        Ok(self.evaluate(tape, x0, &draws, &[model])?[0])
    }

    /// Loss on clean token sequences, flat `batch·L`.
    pub fn data_loss<R: Rng + ?Sized>(&self, tape: &mut Tape, model: ModelRef, tokens: &[usize], length: usize, rng: &mut R) -> Result<Var> {
        let n = self.process.vocab();
        if let Some(&bad) = tokens.iter().find(|&&x| x >= n) {
            return Err(Error::Data(format!("token {bad} outside vocabulary {n}")));
        }
        let x0 = tape.constant(one_hot_rows(tokens, n), &[tokens.len(), n])?;
        self.loss(tape, model, x0, length, rng)
    }
}
