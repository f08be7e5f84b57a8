//! Tiny bidirectional transformer denoisers.
//!
//! Three output parameterizations share one trunk:
//! - `Score`: `exp(logits)`, a positive concrete-score estimate per token.
//! - `X0Subs`: clean-token distribution with zero mass on the mask and exact
//!   copy-through of unmasked input tokens.
//! - `X0Duo`: clean-token distribution over simplex-valued inputs, embedded by
//!   the matrix product of the input rows with the token table.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{relative_error, richardson_derivative, Tape, Var};
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;
const TIME_FREQS: usize = 8;
const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    Score,
    X0Subs,
    X0Duo,
}

impl Parameterization {
    pub fn name(self) -> &'static str {
        match self {
            Parameterization::Score => "score",
            Parameterization::X0Subs => "x0-subs",
            Parameterization::X0Duo => "x0-duo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(Parameterization::Score),
            "x0-subs" => Ok(Parameterization::X0Subs),
            "x0-duo" => Ok(Parameterization::X0Duo),
            other => Err(Error::Config(format!("unknown parameterization '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Residual blocks.
    pub blocks: usize,
    pub heads: usize,
    /// Must be 0; kept so configs state it explicitly.
    pub dropout: f64,
    /// Vocabulary size, mask slot included.
    pub vocab: usize,
    /// Sequence length.
    pub length: usize,
    /// Mask token, required by `X0Subs`.
    pub mask: Option<usize>,
    /// Adds a learned embedding of `t` to every position when set.
    pub time_conditioning: bool,
    /// Divides logits before the output softmax.
    pub temperature: f64,
}

impl ModelConfig {
    pub fn new(vocab: usize, length: usize, mask: Option<usize>) -> Self {
        Self {
            d: 64,
            blocks: 2,
            heads: 2,
            dropout: 0.0,
            vocab,
            length,
            mask,
            time_conditioning: true,
            temperature: 1.0,
        }
    }

    pub fn validate(&self, param: Parameterization) -> Result<()> {
        if self.d == 0 || self.blocks == 0 || self.length == 0 || self.heads == 0 {
            return Err(Error::Config("d, blocks, heads and length must be at least 1".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.d, self.heads)));
        }
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocabulary {} below 2", self.vocab)));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is not supported; set it to 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        match (param, self.mask) {
            (Parameterization::X0Subs, None) => {
                Err(Error::Config("x0-subs requires a mask token".into()))
            }
            (_, Some(m)) if m >= self.vocab => {
                Err(Error::Config(format!("mask {m} outside vocabulary {}", self.vocab)))
            }
            _ => Ok(()),
        }
    }
}

/// One named weight array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Weights of a denoiser plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub parameterization: Parameterization,
    pub tensors: Vec<ParamTensor>,
}

/// Model input: token ids (flat, `batch·L`) or simplex rows (`[batch·L, N]`).
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Tokens(&'a [usize]),
    Simplex(Var),
}

/// Parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }
}

/// Names and shapes of every weight, in storage order.
pub fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, n) = (config.d, config.vocab);
    let mut out = vec![("tok_emb".to_string(), vec![n, d]), ("pos_emb".to_string(), vec![config.length, d])];
    if config.time_conditioning {
        out.push(("time.w".into(), vec![2 * TIME_FREQS, d]));
        out.push(("time.b".into(), vec![d]));
    }
    for b in 0..config.blocks {
        let p = |s: &str| format!("block{b}.{s}");
        out.push((p("ln1.gain"), vec![d]));
        out.push((p("ln1.bias"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((p(w), vec![d, d]));
        }
        out.push((p("ln2.gain"), vec![d]));
        out.push((p("ln2.bias"), vec![d]));
        out.push((p("ff1.w"), vec![d, FFN_MULT * d]));
        out.push((p("ff1.b"), vec![FFN_MULT * d]));
        out.push((p("ff2.w"), vec![FFN_MULT * d, d]));
        out.push((p("ff2.b"), vec![d]));
    }
    out.push(("final.gain".into(), vec![d]));
    out.push(("final.bias".into(), vec![d]));
    out.push(("head.w".into(), vec![d, n]));
    out.push(("head.b".into(), vec![n]));
    out
}

/// Sinusoidal features of `t`.
fn time_features(t: f64) -> [f64; 2 * TIME_FREQS] {
    let mut f = [0.0; 2 * TIME_FREQS];
    for k in 0..TIME_FREQS {
        let w = (1u32 << k) as f64;
        f[2 * k] = (w * t).sin();
        f[2 * k + 1] = (w * t).cos();
    }
    f
}

/// Normal(0, 0.02) weights, unit layer-norm gains, zero biases.
pub fn init_denoiser<R: Rng + ?Sized>(config: &ModelConfig, parameterization: Parameterization, rng: &mut R) -> Result<DenoiserParams> {
    config.validate(parameterization)?;
    let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::Config(e.to_string()))?;
    let tensors = param_layout(config)
        .into_iter()
        .map(|(name, shape)| {
            let len: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; len]
            } else if name.ends_with(".b") || name.ends_with(".bias") {
                vec![0.0; len]
            } else {
                (0..len).map(|_| normal.sample(rng)).collect()
            };
            ParamTensor { name, shape, data }
        })
        .collect();
    Ok(DenoiserParams { config: config.clone(), parameterization, tensors })
}

impl DenoiserParams {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Places every weight on the tape; `trainable` decides whether gradients flow to them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams> {
        let mut vars = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            vars.push(tape.leaf(t.data.clone(), &t.shape, trainable)?);
        }
        Ok(BoundParams { names: self.tensors.iter().map(|t| t.name.clone()).collect(), vars })
    }

    /// Same architecture and shapes.
    pub fn compatible_with(&self, other: &DenoiserParams) -> bool {
        self.config == other.config
            && self.parameterization == other.parameterization
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Network logits `[batch·L, N]` before the output head nonlinearity.
    pub fn logits(&self, tape: &mut Tape, p: &BoundParams, input: ModelInput, times: &[f64]) -> Result<Var> {
        let cfg = &self.config;
        let l = cfg.length;
        let batch = times.len();
        let rows = batch * l;
        let emb = p.get("tok_emb")?;
        let mut h = match input {
            ModelInput::Tokens(tokens) => {
                if tokens.len() != rows {
                    return Err(Error::Shape(format!("{} tokens for {batch} sequences of {l}", tokens.len())));
                }
                if let Some(&bad) = tokens.iter().find(|&&x| x >= cfg.vocab) {
                    return Err(Error::Domain(format!("token {bad} outside vocabulary {}", cfg.vocab)));
                }
                tape.gather_rows(emb, tokens)?
            }
            ModelInput::Simplex(x) => {
                if tape.shape(x) != [rows, cfg.vocab] {
                    return Err(Error::Shape(format!("simplex input {:?}, expected [{rows}, {}]", tape.shape(x), cfg.vocab)));
                }
                tape.matmul(x, emb)?
            }
        };
        let pos_idx: Vec<usize> = (0..rows).map(|r| r % l).collect();
        let pos = tape.gather_rows(p.get("pos_emb")?, &pos_idx)?;
        h = tape.add(h, pos)?;
        if cfg.time_conditioning {
            let feats: Vec<f64> = times.iter().flat_map(|&t| time_features(t)).collect();
            let f = tape.constant(feats, &[batch, 2 * TIME_FREQS])?;
            let te = tape.matmul(f, p.get("time.w")?)?;
            let te = tape.add(te, p.get("time.b")?)?;
            let rep: Vec<usize> = (0..rows).map(|r| r / l).collect();
            let te = tape.gather_rows(te, &rep)?;
            h = tape.add(h, te)?;
        }
        for b in 0..cfg.blocks {
            let g = |s: &str| p.get(&format!("block{b}.{s}"));
            let a = affine_norm(tape, h, g("ln1.gain")?, g("ln1.bias")?)?;
            let q = tape.matmul(a, g("wq")?)?;
            let k = tape.matmul(a, g("wk")?)?;
            let v = tape.matmul(a, g("wv")?)?;
            let att = tape.attention(q, k, v, l, cfg.heads)?;
            let att = tape.matmul(att, g("wo")?)?;
            h = tape.add(h, att)?;
            let f = affine_norm(tape, h, g("ln2.gain")?, g("ln2.bias")?)?;
            let f = tape.matmul(f, g("ff1.w")?)?;
            let f = tape.add(f, g("ff1.b")?)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, g("ff2.w")?)?;
            let f = tape.add(f, g("ff2.b")?)?;
            h = tape.add(h, f)?;
        }
        let h = affine_norm(tape, h, p.get("final.gain")?, p.get("final.bias")?)?;
        let out = tape.matmul(h, p.get("head.w")?)?;
        let out = tape.add(out, p.get("head.b")?)?;
        debug_assert_eq!(tape.shape(out), [rows, cfg.vocab]);
        Ok(out)
    }

    /// Parameterization output `[batch·L, N]`: scores or clean-token distributions.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, input: ModelInput, times: &[f64]) -> Result<Var> {
        if let (Parameterization::Score | Parameterization::X0Subs, ModelInput::Simplex(_)) = (self.parameterization, input) {
            return Err(Error::InputKind(format!("{} models take token inputs", self.parameterization.name())));
        }
        let logits = self.logits(tape, p, input, times)?;
        match self.parameterization {
            Parameterization::Score => tape.exp(logits),
            Parameterization::X0Subs => {
                let ModelInput::Tokens(tokens) = input else { unreachable!() };
                self.subs_head(tape, logits, tokens)
            }
            Parameterization::X0Duo => self.tempered_softmax(tape, logits, None),
        }
    }

    /// Simplex output used when the network acts as a generator of clean data.
    ///
    /// Score networks are read through the same masked softmax as `X0Subs` on
    /// absorbing vocabularies (normalized scores at a masked position are the
    /// clean-token posterior) and through a plain softmax otherwise.
    pub fn forward_simplex(&self, tape: &mut Tape, p: &BoundParams, input: ModelInput, times: &[f64]) -> Result<Var> {
        match (self.parameterization, input, self.config.mask) {
            (Parameterization::X0Duo, _, _) => self.forward(tape, p, input, times),
            (Parameterization::X0Subs, _, _) => self.forward(tape, p, input, times),
            (Parameterization::Score, ModelInput::Tokens(tokens), Some(_)) => {
                let logits = self.logits(tape, p, input, times)?;
                self.subs_head(tape, logits, tokens)
            }
            (Parameterization::Score, ModelInput::Tokens(_), None) => {
                let logits = self.logits(tape, p, input, times)?;
                self.tempered_softmax(tape, logits, None)
            }
            (Parameterization::Score, ModelInput::Simplex(_), _) => {
                Err(Error::InputKind("score models take token inputs".into()))
            }
        }
    }

    fn tempered_softmax(&self, tape: &mut Tape, logits: Var, excluded: Option<usize>) -> Result<Var> {
        let z = if self.config.temperature == 1.0 { logits } else { tape.scale(logits, 1.0 / self.config.temperature)? };
        tape.softmax_excluding(z, excluded)
    }

    /// Masked rows: softmax without the mask column. Unmasked rows: exact one-hot of the input.
    fn subs_head(&self, tape: &mut Tape, logits: Var, tokens: &[usize]) -> Result<Var> {
        let n = self.config.vocab;
        let m = self.config.mask.ok_or_else(|| Error::Config("mask token required".into()))?;
        let probs = self.tempered_softmax(tape, logits, Some(m))?;
        let mut keep = vec![0.0; tokens.len() * n];
        let mut copy = vec![0.0; tokens.len() * n];
        for (r, &x) in tokens.iter().enumerate() {
            if x == m {
                keep[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 1.0);
            } else {
                copy[r * n + x] = 1.0;
            }
        }
        let keep = tape.constant(keep, &[tokens.len(), n])?;
        let copy = tape.constant(copy, &[tokens.len(), n])?;
        let kept = tape.mul(probs, keep)?;
        tape.add(kept, copy)
    }

    /// Output values for token inputs, no gradients.
    pub fn predict_tokens(&self, tokens: &[usize], times: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &p, ModelInput::Tokens(tokens), times)?;
        Ok(tape.value(out).to_vec())
    }

    /// Generator-view simplex values for token inputs, no gradients.
    pub fn predict_simplex(&self, tokens: &[usize], times: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let out = self.forward_simplex(&mut tape, &p, ModelInput::Tokens(tokens), times)?;
        Ok(tape.value(out).to_vec())
    }
}

fn affine_norm(tape: &mut Tape, h: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(h)?;
    let n = tape.mul(n, gain)?;
    tape.add(n, bias)
}

/// Worst relative error between backward gradients and finite differences of
/// `f` over `n_coords` weight coordinates drawn uniformly from all tensors.
pub fn param_gradient_check<F, R>(params: &DenoiserParams, f: F, h: f64, n_coords: usize, rng: &mut R) -> Result<f64>
where
    F: Fn(&DenoiserParams, &mut Tape, &BoundParams) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true)?;
    let loss = f(params, &mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let total = params.param_count();
    let coords = rand::seq::index::sample(rng, total, n_coords.min(total)).into_vec();
    let locate = |mut i: usize| {
        for (k, t) in params.tensors.iter().enumerate() {
            if i < t.data.len() {
                return (k, i);
            }
            i -= t.data.len();
        }
        unreachable!("coordinate within parameter count")
    };
    let mut worst = 0.0f64;
    for c in coords {
        let (k, i) = locate(c);
        let g = grads.wrt(bound.vars[k])[i];
        let fd = richardson_derivative(
            |d| {
                let mut p = params.clone();
                p.tensors[k].data[i] += d;
                let mut tape = Tape::new();
                let bound = p.bind(&mut tape, false)?;
                let loss = f(&p, &mut tape, &bound)?;
                Ok(tape.scalar(loss))
            },
            h,
        )?;
        worst = worst.max(relative_error(fd, g));
    }
    Ok(worst)
}

/// Deep copy.
pub fn copy_params(src: &DenoiserParams) -> DenoiserParams {
    src.clone()
}

/// `shadow ← decay·shadow + (1−decay)·live`, elementwise.
pub fn ema_update(shadow: &mut DenoiserParams, live: &DenoiserParams, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("decay {decay} outside [0, 1)")));
    }
    if !shadow.compatible_with(live) {
        return Err(Error::Shape("EMA shadow and live weights differ in shape".into()));
    }
    for (s, l) in shadow.tensors.iter_mut().zip(&live.tensors) {
        for (a, b) in s.data.iter_mut().zip(&l.data) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(vocab: usize, mask: Option<usize>) -> ModelConfig {
        ModelConfig { d: 8, blocks: 1, heads: 2, length: 4, ..ModelConfig::new(vocab, 4, mask) }
    }

    fn model(p: Parameterization, mask: Option<usize>, seed: u64) -> DenoiserParams {
        init_denoiser(&cfg(5, mask), p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(model(Parameterization::Score, Some(4), 1), model(Parameterization::Score, Some(4), 1));
        assert_ne!(model(Parameterization::Score, Some(4), 1), model(Parameterization::Score, Some(4), 2));
    }

    #[test]
    fn subs_invariants_at_init() {
        let m = model(Parameterization::X0Subs, Some(4), 3);
        let tokens = [4, 2, 4, 0, 1, 4, 4, 4];
        let out = m.predict_tokens(&tokens, &[0.3, 0.9]).unwrap();
        for (r, &x) in tokens.iter().enumerate() {
            let row = &out[r * 5..(r + 1) * 5];
            if x == 4 {
                assert_eq!(row[4], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            } else {
                let mut oh = [0.0; 5];
                oh[x] = 1.0;
                assert_eq!(row, &oh);
            }
        }
    }

    #[test]
    fn score_outputs_positive() {
        let m = model(Parameterization::Score, Some(4), 4);
        let out = m.predict_tokens(&[4, 4, 1, 4], &[0.5]).unwrap();
        assert!(out.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn soft_lookup_matches_token_lookup_bitwise() {
        let m = model(Parameterization::X0Duo, None, 5);
        let tokens = [0, 3, 1, 4, 2, 2, 0, 1];
        let by_tokens = m.predict_tokens(&tokens, &[0.2, 0.7]).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false).unwrap();
        let mut oh = vec![0.0; tokens.len() * 5];
        for (r, &x) in tokens.iter().enumerate() {
            oh[r * 5 + x] = 1.0;
        }
        let x = tape.constant(oh, &[tokens.len(), 5]).unwrap();
        let out = m.forward(&mut tape, &p, ModelInput::Simplex(x), &[0.2, 0.7]).unwrap();
        assert_eq!(tape.value(out), by_tokens.as_slice());
        for row in by_tokens.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn input_kind_checked() {
        let m = model(Parameterization::X0Subs, Some(4), 6);
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false).unwrap();
        let x = tape.constant(vec![0.2; 20], &[4, 5]).unwrap();
        assert!(matches!(m.forward(&mut tape, &p, ModelInput::Simplex(x), &[0.5]), Err(Error::InputKind(_))));
    }

    #[test]
    fn simplex_input_gradient_matches_differences() {
        let m = model(Parameterization::X0Duo, None, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0: Vec<f64> = (0..20).map(|_| rng.gen_range(0.1..1.0)).collect();
        let weights: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |t: &mut Tape, x: Var| {
            let p = m.bind(t, false)?;
            let x = t.reshape(x, &[4, 5])?;
            let out = m.forward(t, &p, ModelInput::Simplex(x), &[0.4])?;
            let w = t.constant(weights.clone(), &[4, 5])?;
            let l = t.log(out)?;
            let y = t.mul(l, w)?;
            t.sum(y)
        };
        let err = finite_difference_check(f, &x0, 1e-4, 20, &mut rng).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn copy_is_independent() {
        let src = model(Parameterization::X0Subs, Some(4), 10);
        let before = src.predict_tokens(&[4, 1, 4, 4], &[0.5]).unwrap();
        let mut c = copy_params(&src);
        c.tensors[0].data[0] += 1.0;
        assert_eq!(src.predict_tokens(&[4, 1, 4, 4], &[0.5]).unwrap(), before);
        assert_eq!(copy_params(&src), copy_params(&src));
    }

    #[test]
    fn ema_examples() {
        let live = model(Parameterization::Score, Some(4), 11);
        let mut shadow = live.clone();
        shadow.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        let mut two = live.clone();
        two.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 2.0));
        ema_update(&mut shadow, &two, 0.5).unwrap();
        assert!(shadow.tensors.iter().all(|t| t.data.iter().all(|&v| v == 1.0)));
        ema_update(&mut shadow, &live, 0.0).unwrap();
        assert_eq!(shadow, live);
        assert!(ema_update(&mut shadow, &live, 1.0).is_err());
    }

    #[test]
    fn time_embedding_can_be_disabled() {
        let mut c = cfg(5, Some(4));
        c.time_conditioning = false;
        let m = init_denoiser(&c, Parameterization::X0Subs, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert!(m.tensors.iter().all(|t| !t.name.starts_with("time")));
        let a = m.predict_tokens(&[4, 4, 1, 4], &[0.1]).unwrap();
        let b = m.predict_tokens(&[4, 4, 1, 4], &[0.9]).unwrap();
        assert_eq!(a, b);
    }
}
