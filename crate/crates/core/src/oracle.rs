//! Brute-force ground truth on enumerable instances.
//!
//! Clean sequences over `N` data tokens are indexed lexicographically in base
//! `N`; noisy sequences use base `V = process.vocab()` with the same token ids,
//! so the mask (absorbing) is digit `N`.

use rand::Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::loss::{token_integrand, LossKind};
use crate::process::{DiffusionProcess, ProcessKind, TimePoint};
use crate::quadrature::gauss_legendre;
use crate::sampler::{stay_masked_probability, uniform_posterior_into, Denoiser, OutputKind, SamplerConfig, SamplerKind};

/// Largest enumerable state space.
pub const STATE_CAP: usize = 1_000_000;
/// Lowest accepted quadrature order.
pub const MIN_QUAD_ORDER: usize = 16;
const PREDICT_BATCH: usize = 4096;

/// Number of sequences of length `length` over `base` symbols, capped.
pub fn state_count(base: usize, length: usize) -> Result<usize> {
    let states = (base as u128).checked_pow(length as u32).unwrap_or(u128::MAX);
    if states > STATE_CAP as u128 {
        return Err(Error::InstanceTooLarge { states, cap: STATE_CAP });
    }
    Ok(states as usize)
}

/// Digits of `idx` in base `base`, most significant first.
pub fn decode(idx: usize, base: usize, out: &mut [usize]) {
    let mut r = idx;
    for d in out.iter_mut().rev() {
        *d = r % base;
        r /= base;
    }
}

pub fn encode(seq: &[usize], base: usize) -> usize {
    seq.iter().fold(0, |acc, &d| acc * base + d)
}

/// All sequences in lexicographic order.
pub fn enumerate_space(n_tokens: usize, length: usize) -> Result<Vec<Vec<usize>>> {
    let count = state_count(n_tokens, length)?;
    Ok((0..count)
        .map(|i| {
            let mut s = vec![0; length];
            decode(i, n_tokens, &mut s);
            s
        })
        .collect())
}

/// Explicit probability table over every clean sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDistribution {
    n_tokens: usize,
    length: usize,
    probs: Vec<f64>,
}

impl ToyDistribution {
    pub fn new(n_tokens: usize, length: usize, probs: Vec<f64>) -> Result<Self> {
        if n_tokens < 2 {
            return Err(Error::InvalidVocabulary(format!("need at least 2 tokens, got {n_tokens}")));
        }
        if length == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        let count = state_count(n_tokens, length)?;
        if probs.len() != count {
            return Err(Error::Shape(format!("table of {} entries for {count} sequences", probs.len())));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidSimplex("negative or non-finite probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSimplex(format!("table sums to {total}")));
        }
        Ok(Self { n_tokens, length, probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(n_tokens: usize, length: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidSimplex(format!("weights sum to {total}")));
        }
        Self::new(n_tokens, length, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn point_mass(n_tokens: usize, length: usize, seq: &[usize]) -> Result<Self> {
        let count = state_count(n_tokens, length)?;
        let mut probs = vec![0.0; count];
        probs[encode_checked(seq, n_tokens, length)?] = 1.0;
        Self::new(n_tokens, length, probs)
    }

    pub fn uniform(n_tokens: usize, length: usize) -> Result<Self> {
        let count = state_count(n_tokens, length)?;
        Self::new(n_tokens, length, vec![1.0 / count as f64; count])
    }

    /// Independent positions with the given per-position marginals.
    pub fn product(n_tokens: usize, marginals: &[Vec<f64>]) -> Result<Self> {
        let length = marginals.len();
        let count = state_count(n_tokens, length)?;
        let mut seq = vec![0; length];
        let mut w = vec![0.0; count];
        for (i, wi) in w.iter_mut().enumerate() {
            decode(i, n_tokens, &mut seq);
            *wi = seq.iter().zip(marginals).map(|(&x, m)| m[x]).product();
        }
        Self::from_weights(n_tokens, length, w)
    }

    /// Draw from Dirichlet(1, …, 1) over the table.
    pub fn dirichlet<R: Rng + ?Sized>(n_tokens: usize, length: usize, rng: &mut R) -> Result<Self> {
        let count = state_count(n_tokens, length)?;
        let w: Vec<f64> = (0..count).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        Self::from_weights(n_tokens, length, w)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn size(&self) -> usize {
        self.probs.len()
    }

    pub fn index_of(&self, seq: &[usize]) -> Result<usize> {
        encode_checked(seq, self.n_tokens, self.length)
    }

    pub fn sequence(&self, idx: usize) -> Vec<usize> {
        let mut s = vec![0; self.length];
        decode(idx, self.n_tokens, &mut s);
        s
    }

    pub fn prob(&self, seq: &[usize]) -> Result<f64> {
        Ok(self.probs[self.index_of(seq)?])
    }

    /// Inverse-CDF draw of one sequence.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        self.sequence(crate::process::sample_categorical(&self.probs, rng))
    }

    /// Marginal law of position `l`.
    pub fn position_marginal(&self, l: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_tokens];
        let mut seq = vec![0; self.length];
        for (i, &p) in self.probs.iter().enumerate() {
            decode(i, self.n_tokens, &mut seq);
            out[seq[l]] += p;
        }
        out
    }

    fn check_process(&self, process: &DiffusionProcess) -> Result<()> {
        if process.data_tokens() != self.n_tokens {
            return Err(Error::InvalidVocabulary(format!(
                "process has {} data tokens, distribution has {}",
                process.data_tokens(),
                self.n_tokens
            )));
        }
        Ok(())
    }
}

fn encode_checked(seq: &[usize], base: usize, length: usize) -> Result<usize> {
    if seq.len() != length {
        return Err(Error::Shape(format!("sequence of length {} for length {length}", seq.len())));
    }
    if let Some(&x) = seq.iter().find(|&&x| x >= base) {
        return Err(Error::Domain(format!("token {x} outside {base} symbols")));
    }
    Ok(encode(seq, base))
}

/// `Σ p log(p/q)` in nats.
pub fn exact_kl(p: &ToyDistribution, q: &ToyDistribution) -> Result<f64> {
    same_space(p, q)?;
    let mut kl = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Err(Error::InfiniteKl);
        }
        kl += a * (a / b).ln();
    }
    Ok(kl.max(0.0))
}

pub fn total_variation(p: &ToyDistribution, q: &ToyDistribution) -> Result<f64> {
    same_space(p, q)?;
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn same_space(p: &ToyDistribution, q: &ToyDistribution) -> Result<()> {
    if p.n_tokens != q.n_tokens || p.length != q.length {
        return Err(Error::Shape(format!(
            "distributions over {}^{} and {}^{}",
            p.n_tokens, p.length, q.n_tokens, q.length
        )));
    }
    Ok(())
}

/// Unnormalized joint weights `p(x0)·Π_{l≠skip} p_{t|0}(x_t^l|x0^l)` over clean sequences.
fn joint_weights(p: &ToyDistribution, process: &DiffusionProcess, alpha: f64, x_t: &[usize], skip: Option<usize>) -> Vec<f64> {
    let mut seq = vec![0; p.length];
    p.probs
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if w == 0.0 {
                return 0.0;
            }
            decode(i, p.n_tokens, &mut seq);
            let mut v = w;
            for (l, (&xt, &x0)) in x_t.iter().zip(&seq).enumerate() {
                if Some(l) != skip {
                    v *= process.token_kernel(alpha, xt, x0);
                }
            }
            v
        })
        .collect()
}

fn check_noisy(p: &ToyDistribution, process: &DiffusionProcess, x_t: &[usize]) -> Result<()> {
    p.check_process(process)?;
    encode_checked(x_t, process.vocab(), p.length).map(|_| ())
}

/// `p_t(x_t) = Σ_{x0} p(x0) Π_l p_{t|0}(x_t^l|x0^l)`.
pub fn exact_marginal(p: &ToyDistribution, process: &DiffusionProcess, t: f64, x_t: &[usize]) -> Result<f64> {
    check_noisy(p, process, x_t)?;
    let alpha = process.alpha(t)?;
    Ok(joint_weights(p, process, alpha, x_t, None).iter().sum())
}

/// Bayes posterior table over clean sequences given `x_t`.
pub fn exact_posterior(p: &ToyDistribution, process: &DiffusionProcess, t: f64, x_t: &[usize]) -> Result<Vec<f64>> {
    check_noisy(p, process, x_t)?;
    let alpha = process.alpha(t)?;
    let mut w = joint_weights(p, process, alpha, x_t, None);
    normalize(&mut w, x_t)?;
    Ok(w)
}

fn normalize(w: &mut [f64], x_t: &[usize]) -> Result<()> {
    let z: f64 = w.iter().sum();
    if !(z > 0.0) {
        return Err(Error::UnreachableState(format!("{x_t:?} has zero probability")));
    }
    w.iter_mut().for_each(|v| *v /= z);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    /// Per-position Bayes posterior `P(x0^l | x_t)`.
    Posterior,
    /// `P(x0^l | x_t^{−l})`, the minimizer of the uniform-state loss.
    LeaveOneOut,
    /// Concrete score `p_t(x_t^{l→y}) / p_t(x_t)`.
    Score,
}

/// Closed-form denoiser for an explicit distribution.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub dist: ToyDistribution,
    pub process: DiffusionProcess,
    pub kind: OracleKind,
}

impl OracleModel {
    pub fn new(dist: ToyDistribution, process: DiffusionProcess, kind: OracleKind) -> Result<Self> {
        dist.check_process(&process)?;
        Ok(Self { dist, process, kind })
    }

    /// Output rows `[L, V]` at one noisy sequence.
    pub fn predict_one(&self, x_t: &[usize], t: f64) -> Result<Vec<f64>> {
        check_noisy(&self.dist, &self.process, x_t)?;
        let (n, v, len) = (self.dist.n_tokens, self.process.vocab(), self.dist.length);
        let alpha = self.process.alpha(t)?;
        let mut out = vec![0.0; len * v];
        let mut seq = vec![0; len];
        match self.kind {
            OracleKind::Posterior => {
                let mut w = joint_weights(&self.dist, &self.process, alpha, x_t, None);
                normalize(&mut w, x_t)?;
                for (i, &wi) in w.iter().enumerate() {
                    decode(i, n, &mut seq);
                    for (l, &x0) in seq.iter().enumerate() {
                        out[l * v + x0] += wi;
                    }
                }
            }
            OracleKind::LeaveOneOut => {
                for l in 0..len {
                    let mut w = joint_weights(&self.dist, &self.process, alpha, x_t, Some(l));
                    normalize(&mut w, x_t)?;
                    for (i, &wi) in w.iter().enumerate() {
                        decode(i, n, &mut seq);
                        out[l * v + seq[l]] += wi;
                    }
                }
            }
            OracleKind::Score => {
                let z: f64 = joint_weights(&self.dist, &self.process, alpha, x_t, None).iter().sum();
                if !(z > 0.0) {
                    return Err(Error::UnreachableState(format!("{x_t:?} has zero probability")));
                }
                for l in 0..len {
                    let w = joint_weights(&self.dist, &self.process, alpha, x_t, Some(l));
                    let row = &mut out[l * v..(l + 1) * v];
                    for (i, &wi) in w.iter().enumerate() {
                        if wi == 0.0 {
                            continue;
                        }
                        decode(i, n, &mut seq);
                        for (y, r) in row.iter_mut().enumerate() {
                            *r += wi * self.process.token_kernel(alpha, y, seq[l]);
                        }
                    }
                    row.iter_mut().for_each(|r| *r /= z);
                }
            }
        }
        Ok(out)
    }
}

impl Denoiser for OracleModel {
    fn output_kind(&self) -> OutputKind {
        match self.kind {
            OracleKind::Score => OutputKind::Score,
            _ => OutputKind::Clean,
        }
    }

    fn time_dependent(&self) -> bool {
        !(self.kind != OracleKind::Score && self.process.kind() == ProcessKind::Absorbing)
    }

    fn predict(&self, tokens: &[usize], length: usize, t: f64) -> Result<Vec<f64>> {
        if length != self.dist.length || !tokens.len().is_multiple_of(length) {
            return Err(Error::Shape(format!("{} tokens for length {}", tokens.len(), self.dist.length)));
        }
        let mut out = Vec::with_capacity(tokens.len() * self.process.vocab());
        for seq in tokens.chunks(length) {
            out.extend(self.predict_one(seq, t)?);
        }
        Ok(out)
    }
}

/// Clean-data oracle whose plug-in reverse kernel is exact for `process`:
/// the Bayes posterior for absorbing, the leave-one-out posterior for uniform.
pub fn exact_denoiser(p: &ToyDistribution, process: &DiffusionProcess) -> Result<OracleModel> {
    let kind = match process.kind() {
        ProcessKind::Absorbing => OracleKind::Posterior,
        ProcessKind::Uniform => OracleKind::LeaveOneOut,
    };
    OracleModel::new(p.clone(), process.clone(), kind)
}

/// Exact minimizer of the loss over all functions, for data `p_theta`.
pub fn exact_optimal_fake(p_theta: &ToyDistribution, process: &DiffusionProcess, kind: LossKind) -> Result<OracleModel> {
    let oracle = match kind {
        LossKind::Sedd => OracleKind::Score,
        LossKind::Mdlm => OracleKind::Posterior,
        LossKind::Udlm | LossKind::Duo => OracleKind::LeaveOneOut,
    };
    kind.check(kind.parameterization(), process.kind())?;
    OracleModel::new(p_theta.clone(), process.clone(), oracle)
}

fn check_model(model: &dyn Denoiser, kind: LossKind) -> Result<()> {
    let want = if kind == LossKind::Sedd { OutputKind::Score } else { OutputKind::Clean };
    if model.output_kind() != want {
        return Err(Error::Config(format!("{} loss cannot use this model output", kind.name())));
    }
    Ok(())
}

/// Model outputs at the noisy sequences reachable from `p`, indexed by a slot map.
struct Outputs {
    slot: Vec<usize>,
    rows: Vec<f64>,
    width: usize,
}

impl Outputs {
    fn row(&self, idx: usize, l: usize) -> &[f64] {
        let start = (self.slot[idx] + l) * self.width;
        &self.rows[start..start + self.width]
    }
}

/// Sorted indices of noisy sequences with positive probability under `p` at `α`.
fn reachable(p: &ToyDistribution, process: &DiffusionProcess, alpha: f64) -> Result<Vec<usize>> {
    let mut hit = vec![false; state_count(process.vocab(), p.length)?];
    expected_sum(p, process, alpha, |idx, _, l, _| {
        if l == 0 {
            hit[idx] = true;
        }
        Ok(0.0)
    })?;
    Ok(hit.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect())
}

fn outputs(model: &dyn Denoiser, process: &DiffusionProcess, length: usize, t: f64, states: &[usize]) -> Result<Outputs> {
    let v = process.vocab();
    let mut slot = vec![usize::MAX; state_count(v, length)?];
    let mut rows = Vec::with_capacity(states.len() * length * v);
    for (b, batch) in states.chunks(PREDICT_BATCH).enumerate() {
        let mut tokens = vec![0; batch.len() * length];
        for (k, &i) in batch.iter().enumerate() {
            decode(i, v, &mut tokens[k * length..(k + 1) * length]);
            slot[i] = (b * PREDICT_BATCH + k) * length;
        }
        rows.extend(model.predict(&tokens, length, t)?);
    }
    Ok(Outputs { slot, rows, width: v })
}

/// `Σ_{x0} p(x0) Σ_{x_t} p_{t|0}(x_t|x0) Σ_l f(x_t index, x_t, l, x0^l)`.
fn expected_sum(
    p: &ToyDistribution,
    process: &DiffusionProcess,
    alpha: f64,
    mut f: impl FnMut(usize, &[usize], usize, usize) -> Result<f64>,
) -> Result<f64> {
    let (n, v, len) = (p.n_tokens, process.vocab(), p.length);
    let mut x0 = vec![0; len];
    let mut xt = vec![0; len];
    let mut supports: Vec<Vec<(usize, f64)>> = vec![vec![]; len];
    let mut total = 0.0;
    for (i, &px) in p.probs.iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        decode(i, n, &mut x0);
        for (l, s) in supports.iter_mut().enumerate() {
            s.clear();
            s.extend((0..v).map(|z| (z, process.token_kernel(alpha, z, x0[l]))).filter(|&(_, k)| k > 0.0));
        }
        let mut choice = vec![0usize; len];
        loop {
            let mut prob = px;
            for l in 0..len {
                let (z, k) = supports[l][choice[l]];
                xt[l] = z;
                prob *= k;
            }
            let idx = encode(&xt, v);
            let mut inner = 0.0;
            for l in 0..len {
                inner += f(idx, &xt, l, x0[l])?;
            }
            total += prob * inner;
            if !advance(&mut choice, &supports) {
                break;
            }
        }
    }
    Ok(total)
}

/// Odometer step over per-position options; false once every combination is visited.
fn advance(choice: &mut [usize], options: &[Vec<(usize, f64)>]) -> bool {
    for l in (0..choice.len()).rev() {
        choice[l] += 1;
        if choice[l] < options[l].len() {
            return true;
        }
        choice[l] = 0;
    }
    false
}

fn one_hots(v: usize) -> Vec<Vec<f64>> {
    (0..v)
        .map(|i| {
            let mut e = vec![0.0; v];
            e[i] = 1.0;
            e
        })
        .collect()
}

fn check_order(quad_order: usize) -> Result<()> {
    if quad_order < MIN_QUAD_ORDER {
        return Err(Error::Config(format!("quadrature order {quad_order} below {MIN_QUAD_ORDER}")));
    }
    Ok(())
}

/// Panel breakpoints, graded toward `t = 0` where low-probability states
/// make the integrand vary on short scales.
const PANEL_BREAKS: [f64; 10] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

/// Integral over `t ∈ [0, 1]` with a `quad_order`-point Gauss–Legendre rule per panel.
fn integrate(process: &DiffusionProcess, quad_order: usize, mut integrand: impl FnMut(&TimePoint) -> Result<f64>) -> Result<f64> {
    let mut total = 0.0;
    for w in PANEL_BREAKS.windows(2) {
        let rule = gauss_legendre(quad_order, w[0], w[1]);
        for (&t, &wt) in rule.nodes.iter().zip(&rule.weights) {
            total += wt * integrand(&process.at(t)?)?;
        }
    }
    Ok(total)
}

/// Exact sequence loss of `model` under data `p_data`, integrated over time.
///
/// The relaxed loss is evaluated in its `τ → 0` form.
pub fn exact_nelbo(
    p_data: &ToyDistribution,
    model: &dyn Denoiser,
    process: &DiffusionProcess,
    kind: LossKind,
    quad_order: usize,
    include_constant: bool,
) -> Result<f64> {
    p_data.check_process(process)?;
    kind.check(kind.parameterization(), process.kind())?;
    check_order(quad_order)?;
    check_model(model, kind)?;
    let (v, len) = (process.vocab(), p_data.length);
    let hot = one_hots(v);
    integrate(process, quad_order, |tp| {
        let out = outputs(model, process, len, tp.t, &reachable(p_data, process, tp.alpha)?)?;
        expected_sum(p_data, process, tp.alpha, |idx, xt, l, x0| {
            token_integrand(kind, process, tp, xt[l], out.row(idx, l), &hot[x0], include_constant)
        })
    })
}

/// `E_{p_θ}[L(teacher)] − E_{p_θ}[L(f̂*_θ)]` with the exact optimal fake for `p_θ`.
pub fn exact_inverse_loss(
    p_theta: &ToyDistribution,
    teacher: &dyn Denoiser,
    process: &DiffusionProcess,
    kind: LossKind,
    quad_order: usize,
) -> Result<f64> {
    check_order(quad_order)?;
    let fake = exact_optimal_fake(p_theta, process, kind)?;
    integrate(process, quad_order, |tp| inverse_integrand(p_theta, teacher, &fake, process, kind, tp))
}

/// Time integrand of [`exact_inverse_loss`] at one time.
pub fn exact_inverse_integrand(
    p_theta: &ToyDistribution,
    teacher: &dyn Denoiser,
    process: &DiffusionProcess,
    kind: LossKind,
    t: f64,
) -> Result<f64> {
    let fake = exact_optimal_fake(p_theta, process, kind)?;
    inverse_integrand(p_theta, teacher, &fake, process, kind, &process.at(t)?)
}

fn inverse_integrand(
    p_theta: &ToyDistribution,
    teacher: &dyn Denoiser,
    fake: &OracleModel,
    process: &DiffusionProcess,
    kind: LossKind,
    tp: &TimePoint,
) -> Result<f64> {
    p_theta.check_process(process)?;
    check_model(teacher, kind)?;
    let (v, len) = (process.vocab(), p_theta.length);
    let hot = one_hots(v);
    let states = reachable(p_theta, process, tp.alpha)?;
    let teacher_out = outputs(teacher, process, len, tp.t, &states)?;
    let fake_out = outputs(fake, process, len, tp.t, &states)?;
    expected_sum(p_theta, process, tp.alpha, |idx, xt, l, x0| {
        let a = token_integrand(kind, process, tp, xt[l], teacher_out.row(idx, l), &hot[x0], false)?;
        let b = token_integrand(kind, process, tp, xt[l], fake_out.row(idx, l), &hot[x0], false)?;
        Ok(a - b)
    })
}

/// Options at each position of one source state: `(token, probability)`.
fn propagate_state(base: usize, mass: f64, options: &[Vec<(usize, f64)>], next: &mut [f64]) {
    fn rec(options: &[Vec<(usize, f64)>], base: usize, idx: usize, prob: f64, next: &mut [f64]) {
        match options.split_first() {
            None => next[idx] += prob,
            Some((first, rest)) => {
                for &(z, q) in first {
                    if q > 0.0 {
                        rec(rest, base, idx * base + z, prob * q, next);
                    }
                }
            }
        }
    }
    rec(options, base, 0, mass, next);
}

/// Mean total variation between the clean rows of `model` and the `kind`
/// oracle for `p`, over `x_t ~ p_t` at each of `times`. Absorbing processes
/// count masked positions only.
pub fn expected_posterior_tv(
    p: &ToyDistribution,
    model: &dyn Denoiser,
    process: &DiffusionProcess,
    kind: OracleKind,
    times: &[f64],
) -> Result<f64> {
    if model.output_kind() != OutputKind::Clean || kind == OracleKind::Score {
        return Err(Error::Config("posterior distance compares clean-data outputs".into()));
    }
    let oracle = OracleModel::new(p.clone(), process.clone(), kind)?;
    let mask = process.mask();
    let (mut num, mut den) = (0.0, 0.0);
    for &t in times {
        let alpha = process.alpha(t)?;
        let states = reachable(p, process, alpha)?;
        let got = outputs(model, process, p.length, t, &states)?;
        let want = outputs(&oracle, process, p.length, t, &states)?;
        num += expected_sum(p, process, alpha, |idx, xt, l, _| {
            if mask.is_some_and(|m| xt[l] != m) {
                return Ok(0.0);
            }
            Ok(0.5 * got.row(idx, l).iter().zip(want.row(idx, l)).map(|(a, b)| (a - b).abs()).sum::<f64>())
        })?;
        den += expected_sum(p, process, alpha, |_, xt, l, _| Ok(if mask.is_some_and(|m| xt[l] != m) { 0.0 } else { 1.0 }))?;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Exact terminal law of an ancestral sampler, by composing its kernels over
/// the joint noisy space. Time-free models are queried once per state.
pub fn exact_sampler_distribution(
    model: &dyn Denoiser,
    process: &DiffusionProcess,
    config: &SamplerConfig,
    length: usize,
) -> Result<ToyDistribution> {
    let mut out = exact_sampler_distributions(model, process, config.kind, &[config.steps], length)?;
    Ok(out.remove(0))
}

/// [`exact_sampler_distribution`] for several step counts; outputs of a
/// time-free model are shared across them.
pub fn exact_sampler_distributions(
    model: &dyn Denoiser,
    process: &DiffusionProcess,
    kind: SamplerKind,
    steps: &[usize],
    length: usize,
) -> Result<Vec<ToyDistribution>> {
    kind.check_process(process.kind())?;
    if kind == SamplerKind::EulerScore {
        return Err(Error::Config("exact sampler distributions cover ancestral samplers only".into()));
    }
    if model.output_kind() != OutputKind::Clean {
        return Err(Error::Config(format!("{} sampler needs clean-data outputs", kind.name())));
    }
    let count = state_count(process.vocab(), length)?;
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; count];
    steps
        .iter()
        .map(|&s| compose(model, process, &SamplerConfig { kind, steps: s, seed: 0 }, length, &mut cache))
        .collect()
}

fn compose(
    model: &dyn Denoiser,
    process: &DiffusionProcess,
    config: &SamplerConfig,
    length: usize,
    cache: &mut [Option<Vec<f64>>],
) -> Result<ToyDistribution> {
    config.validate()?;
    let (v, n) = (process.vocab(), process.data_tokens());
    let count = state_count(v, length)?;
    let mask = process.mask();
    let mut mass = vec![0.0; count];
    match mask {
        Some(m) => mass[encode(&vec![m; length], v)] = 1.0,
        None => mass.iter_mut().for_each(|p| *p = 1.0 / count as f64),
    }
    let cache_ok = !model.time_dependent();
    let mut seq = vec![0; length];
    let mut row = vec![0.0; v];
    let mut options: Vec<Vec<(usize, f64)>> = vec![vec![]; length];
    for (t, s) in config.grid() {
        let (at, as_) = (process.alpha(t)?, process.alpha(s)?);
        if as_ < at {
            return Err(Error::ScheduleOrder { s, t });
        }
        let needs = |idx: usize, seq: &mut [usize]| {
            decode(idx, v, seq);
            mask.is_none_or(|m| seq.contains(&m))
        };
        let pending: Vec<usize> = (0..count)
            .filter(|&i| mass[i] > 0.0 && (!cache_ok || cache[i].is_none()) && needs(i, &mut seq))
            .collect();
        for batch in pending.chunks(PREDICT_BATCH) {
            let mut tokens = vec![0; batch.len() * length];
            for (k, &i) in batch.iter().enumerate() {
                decode(i, v, &mut tokens[k * length..(k + 1) * length]);
            }
            let out = model.predict(&tokens, length, t)?;
            for (k, &i) in batch.iter().enumerate() {
                cache[i] = Some(out[k * length * v..(k + 1) * length * v].to_vec());
            }
        }
        let stay = stay_masked_probability(at, as_);
        let mut next = vec![0.0; count];
        for i in 0..count {
            if mass[i] == 0.0 {
                continue;
            }
            decode(i, v, &mut seq);
            let rows = match (&cache[i], mask) {
                (_, Some(m)) if !seq.contains(&m) => {
                    next[i] += mass[i];
                    continue;
                }
                (Some(r), _) => r,
                (None, _) => return Err(Error::Numeric(format!("missing model output for state {i}"))),
            };
            for l in 0..length {
                let x0_hat = &rows[l * v..(l + 1) * v];
                let opts = &mut options[l];
                opts.clear();
                match mask {
                    Some(m) if seq[l] != m => opts.push((seq[l], 1.0)),
                    Some(m) => {
                        let z: f64 = (0..n).filter(|&y| y != m).map(|y| x0_hat[y]).sum();
                        if !(z > 0.0) {
                            return Err(Error::Numeric(format!("denoiser row has no mass off the mask at state {i}")));
                        }
                        if stay > 0.0 {
                            opts.push((m, stay));
                        }
                        opts.extend((0..v).filter(|&y| y != m).map(|y| (y, (1.0 - stay) * x0_hat[y] / z)));
                    }
                    None => {
                        let src: Vec<f64> = if config.kind == SamplerKind::GreedyTail {
                            let mut e = vec![0.0; v];
                            e[crate::duo::argmax(x0_hat)] = 1.0;
                            e
                        } else {
                            x0_hat.to_vec()
                        };
                        uniform_posterior_into(process, &src, seq[l], at, as_, &mut row)?;
                        opts.extend(row.iter().copied().enumerate());
                    }
                }
            }
            propagate_state(v, mass[i], &options, &mut next);
        }
        mass = next;
        if !cache_ok {
            cache.iter_mut().for_each(|c| *c = None);
        }
    }
    let mut clean = vec![0.0; state_count(n, length)?];
    for (i, &p) in mass.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        decode(i, v, &mut seq);
        if mask.is_some_and(|m| seq.contains(&m)) {
            if p > 1e-12 {
                return Err(Error::Numeric(format!("mass {p} left on masked state {seq:?}")));
            }
            continue;
        }
        clean[encode(&seq, n)] += p;
    }
    ToyDistribution::from_weights(n, length, clean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::NoiseSchedule;

    #[test]
    fn enumeration_is_lexicographic() {
        assert_eq!(enumerate_space(2, 1).unwrap(), vec![vec![0], vec![1]]);
        assert_eq!(enumerate_space(2, 2).unwrap(), vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert!(matches!(enumerate_space(10, 8), Err(Error::InstanceTooLarge { .. })));
    }

    #[test]
    fn kl_closed_forms() {
        let p = ToyDistribution::new(2, 1, vec![0.75, 0.25]).unwrap();
        let q = ToyDistribution::new(2, 1, vec![0.5, 0.5]).unwrap();
        assert!((exact_kl(&p, &q).unwrap() - 0.130812035).abs() < 1e-8);
        assert_eq!(exact_kl(&p, &p).unwrap(), 0.0);
        let d = ToyDistribution::new(2, 1, vec![1.0, 0.0]).unwrap();
        assert!((exact_kl(&d, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(exact_kl(&q, &d), Err(Error::InfiniteKl)));
    }

    #[test]
    fn posterior_edge_cases() {
        let proc_ = DiffusionProcess::for_data(ProcessKind::Absorbing, 2, NoiseSchedule::log_linear(0.0)).unwrap();
        let p = ToyDistribution::new(2, 1, vec![0.75, 0.25]).unwrap();
        let post = exact_posterior(&p, &proc_, 0.5, &[2]).unwrap();
        assert!((post[0] - 0.75).abs() < 1e-15 && (post[1] - 0.25).abs() < 1e-15);
        assert_eq!(exact_posterior(&p, &proc_, 0.0, &[1]).unwrap(), vec![0.0, 1.0]);
        let d = ToyDistribution::new(2, 1, vec![1.0, 0.0]).unwrap();
        assert!(matches!(exact_posterior(&d, &proc_, 0.3, &[1]), Err(Error::UnreachableState(_))));
    }
}
