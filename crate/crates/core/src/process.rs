//! Forward CTMC noising processes over a finite vocabulary.
//!
//! Rate matrices use the column convention: `dp/dt = σ_t Q p`, so column `j`
//! holds the rates out of state `j` and every column sums to zero. The entry
//! `Q[x][y]` is the forward rate from `y` into `x`.

use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance on column sums of a rate matrix.
const COLUMN_SUM_TOL: f64 = 1e-12;
/// Simplex sums within this distance of 1 are renormalized, larger drift is rejected.
const SIMPLEX_SUM_TOL: f64 = 1e-9;
/// Entries down to this negative value are treated as rounding noise.
const SIMPLEX_NEG_TOL: f64 = 1e-12;

/// Dense row-major square matrix, used by oracles and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("expected {} entries, got {}", n * n, data.len())));
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.n + col] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn matmul(&self, other: &SquareMatrix) -> SquareMatrix {
        let n = self.n;
        let mut out = SquareMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n).map(|i| (0..n).map(|k| self.data[i * n + k] * v[k]).sum()).collect()
    }

    pub fn scaled(&self, s: f64) -> SquareMatrix {
        SquareMatrix { n: self.n, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn max_abs_diff(&self, other: &SquareMatrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn norm_one(&self) -> f64 {
        let n = self.n;
        (0..n).map(|j| (0..n).map(|i| self.data[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max)
    }
}

/// Structural family of a rate matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    Absorbing,
    Uniform,
    Dense,
}

/// Base rate matrix `Q`. The two closed-form kinds never allocate a table.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    kind: RateKind,
    size: usize,
    mask_index: Option<usize>,
    entries: Option<SquareMatrix>,
}

impl RateMatrix {
    /// Builds the absorbing or uniform base matrix.
    pub fn build(kind: RateKind, n: usize, mask_index: Option<usize>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidVocabulary(format!("vocabulary size {n} is below 2")));
        }
        match (kind, mask_index) {
            (RateKind::Absorbing, Some(m)) if m < n => {
                Ok(Self { kind, size: n, mask_index: Some(m), entries: None })
            }
            (RateKind::Absorbing, Some(m)) => {
                Err(Error::InvalidMask(format!("mask index {m} outside vocabulary of size {n}")))
            }
            (RateKind::Absorbing, None) => {
                Err(Error::InvalidMask("absorbing matrix requires a mask index".into()))
            }
            (RateKind::Uniform, None) => Ok(Self { kind, size: n, mask_index: None, entries: None }),
            (RateKind::Uniform, Some(_)) => {
                Err(Error::InvalidMask("uniform matrix takes no mask index".into()))
            }
            (RateKind::Dense, _) => {
                Err(Error::Config("dense matrices are built with RateMatrix::dense".into()))
            }
        }
    }

    /// Wraps an explicit table, checking the rate-matrix invariants.
    pub fn dense(entries: SquareMatrix) -> Result<Self> {
        let n = entries.size();
        if n < 2 {
            return Err(Error::InvalidVocabulary(format!("vocabulary size {n} is below 2")));
        }
        for j in 0..n {
            let mut col = 0.0;
            for i in 0..n {
                let v = entries.get(i, j);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite rate at ({i},{j})")));
                }
                if i != j && v < 0.0 {
                    return Err(Error::Domain(format!("negative off-diagonal rate at ({i},{j})")));
                }
                col += v;
            }
            if col.abs() > COLUMN_SUM_TOL {
                return Err(Error::Domain(format!("column {j} sums to {col}")));
            }
        }
        Ok(Self { kind: RateKind::Dense, size: n, mask_index: None, entries: Some(entries) })
    }

    pub fn kind(&self) -> RateKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_index(&self) -> Option<usize> {
        self.mask_index
    }

    /// `Q[row][col]`: forward rate from `col` into `row` (diagonal: negative exit rate).
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        match self.kind {
            RateKind::Absorbing => {
                let m = self.mask_index.unwrap_or(self.size - 1);
                if col == m {
                    0.0
                } else if row == col {
                    -1.0
                } else if row == m {
                    1.0
                } else {
                    0.0
                }
            }
            RateKind::Uniform => {
                if row == col {
                    1.0 - self.size as f64
                } else {
                    1.0
                }
            }
            RateKind::Dense => self.entries.as_ref().map_or(0.0, |e| e.get(row, col)),
        }
    }

    pub fn to_dense(&self) -> SquareMatrix {
        let n = self.size;
        let mut m = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, self.entry(i, j));
            }
        }
        m
    }

    /// Closed form of `exp(σ̄ Q)` for the absorbing and uniform kinds.
    pub fn closed_form_exponential(&self, sigma_bar: f64) -> Result<SquareMatrix> {
        if !(sigma_bar >= 0.0) {
            return Err(Error::Domain(format!("cumulative rate {sigma_bar} must be non-negative")));
        }
        let n = self.size;
        let mut out = SquareMatrix::zeros(n);
        match self.kind {
            RateKind::Absorbing => {
                let m = self.mask_index.unwrap_or(n - 1);
                let alpha = (-sigma_bar).exp();
                for j in 0..n {
                    if j == m {
                        out.set(m, m, 1.0);
                    } else {
                        out.set(j, j, alpha);
                        out.set(m, j, 1.0 - alpha);
                    }
                }
            }
            RateKind::Uniform => {
                let alpha = (-(n as f64) * sigma_bar).exp();
                let off = (1.0 - alpha) / n as f64;
                for i in 0..n {
                    for j in 0..n {
                        out.set(i, j, if i == j { alpha + off } else { off });
                    }
                }
            }
            RateKind::Dense => return dense_matrix_exponential(self, sigma_bar),
        }
        Ok(out)
    }

    /// Reverse-time rate from `x` to `y`: `ratio · σ · Q[x][y]`, with `ratio = p_t(y)/p_t(x)`.
    pub fn reverse_rate(&self, sigma: f64, y: usize, x: usize, ratio: f64) -> Result<f64> {
        if !(ratio >= 0.0) || !ratio.is_finite() {
            return Err(Error::InvalidRatio(ratio));
        }
        if y == x {
            return Err(Error::Domain("reverse rate is defined for y != x; use the diagonal".into()));
        }
        Ok(ratio * sigma * self.entry(x, y))
    }
}

/// `exp(s Q)` by scaling and squaring with a truncated Taylor series.
pub fn dense_matrix_exponential(q: &RateMatrix, s: f64) -> Result<SquareMatrix> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!("scale {s} must be finite and non-negative")));
    }
    let a = q.to_dense().scaled(s);
    if a.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite matrix entry".into()));
    }
    let n = a.size();
    let norm = a.norm_one();
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let a = a.scaled(scale);
    let mut result = SquareMatrix::identity(n);
    let mut term = SquareMatrix::identity(n);
    for k in 1..=30 {
        term = term.matmul(&a).scaled(1.0 / k as f64);
        let biggest = term.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (r, t) in result.data.iter_mut().zip(&term.data) {
            *r += t;
        }
        if biggest < 1e-20 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.matmul(&result);
    }
    Ok(result)
}

/// Family of cumulative-rate schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `σ̄_t = −log(1 − (1−eps) t)` for every process.
    LogLinear,
    /// `α_t = 1 − (1−eps) t` for every process (σ̄ divided by the process rate scale).
    LinearAlpha,
}

/// Noise schedule with a floor `eps ∈ [0, 1)` keeping `α_1 = eps` for the log-linear form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub eps: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { kind: ScheduleKind::LogLinear, eps: 1e-3 }
    }
}

impl NoiseSchedule {
    pub fn log_linear(eps: f64) -> Self {
        Self { kind: ScheduleKind::LogLinear, eps }
    }

    pub fn linear_alpha(eps: f64) -> Self {
        Self { kind: ScheduleKind::LinearAlpha, eps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eps) {
            return Err(Error::Config(format!("schedule floor {} must lie in [0, 1)", self.eps)));
        }
        Ok(())
    }

    /// `σ̄_t` for a process whose rate matrix has exit-rate scale `kappa` (1 absorbing, N uniform).
    pub fn cumulative_sigma(&self, t: f64, kappa: f64) -> Result<f64> {
        check_time(t)?;
        let base = -(1.0 - (1.0 - self.eps) * t).ln();
        Ok(match self.kind {
            ScheduleKind::LogLinear => base,
            ScheduleKind::LinearAlpha => base / kappa,
        })
    }

    fn point(&self, t: f64, kappa: f64) -> Result<TimePoint> {
        check_time(t)?;
        let c = 1.0 - self.eps;
        let u = 1.0 - c * t;
        let base_bar = -u.ln();
        let base_rate = c / u;
        let (sigma_bar, sigma, alpha, alpha_prime) = match self.kind {
            ScheduleKind::LogLinear => {
                (base_bar, base_rate, u.powf(kappa), -kappa * c * u.powf(kappa - 1.0))
            }
            ScheduleKind::LinearAlpha => (base_bar / kappa, base_rate / kappa, u, -c),
        };
        Ok(TimePoint { t, sigma_bar, sigma, alpha, alpha_prime })
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Schedule quantities at one time, computed once and reused in hot loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePoint {
    pub t: f64,
    /// Cumulative rate `σ̄_t`.
    pub sigma_bar: f64,
    /// Instantaneous rate `σ_t = dσ̄/dt`.
    pub sigma: f64,
    /// Probability of keeping the clean token, `α_t`.
    pub alpha: f64,
    /// `dα/dt`.
    pub alpha_prime: f64,
}

impl TimePoint {
    /// `−α'/(1−α)`, the masked-token cross-entropy weight.
    pub fn unmask_weight(&self) -> f64 {
        -self.alpha_prime / (1.0 - self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessKind {
    Absorbing,
    Uniform,
}

/// A rate matrix family plus schedule over a vocabulary of size `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionProcess {
    matrix: RateMatrix,
    schedule: NoiseSchedule,
}

impl DiffusionProcess {
    /// Absorbing process with the mask in the last slot.
    pub fn absorbing(n: usize, schedule: NoiseSchedule) -> Result<Self> {
        Self::absorbing_with_mask(n, n.saturating_sub(1), schedule)
    }

    pub fn absorbing_with_mask(n: usize, mask: usize, schedule: NoiseSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self { matrix: RateMatrix::build(RateKind::Absorbing, n, Some(mask))?, schedule })
    }

    pub fn uniform(n: usize, schedule: NoiseSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self { matrix: RateMatrix::build(RateKind::Uniform, n, None)?, schedule })
    }

    /// Process over `n_tokens` data tokens; absorbing adds one mask slot.
    pub fn for_data(kind: ProcessKind, n_tokens: usize, schedule: NoiseSchedule) -> Result<Self> {
        match kind {
            ProcessKind::Absorbing => Self::absorbing(n_tokens + 1, schedule),
            ProcessKind::Uniform => Self::uniform(n_tokens, schedule),
        }
    }

    pub fn kind(&self) -> ProcessKind {
        match self.matrix.kind() {
            RateKind::Absorbing => ProcessKind::Absorbing,
            _ => ProcessKind::Uniform,
        }
    }

    pub fn matrix(&self) -> &RateMatrix {
        &self.matrix
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    /// Vocabulary size, including the mask slot for absorbing processes.
    pub fn vocab(&self) -> usize {
        self.matrix.size()
    }

    /// Number of data tokens (vocabulary without the mask).
    pub fn data_tokens(&self) -> usize {
        match self.kind() {
            ProcessKind::Absorbing => self.vocab() - 1,
            ProcessKind::Uniform => self.vocab(),
        }
    }

    pub fn mask(&self) -> Option<usize> {
        self.matrix.mask_index()
    }

    fn kappa(&self) -> f64 {
        match self.kind() {
            ProcessKind::Absorbing => 1.0,
            ProcessKind::Uniform => self.vocab() as f64,
        }
    }

    pub fn cumulative_sigma(&self, t: f64) -> Result<f64> {
        self.schedule.cumulative_sigma(t, self.kappa())
    }

    pub fn at(&self, t: f64) -> Result<TimePoint> {
        self.schedule.point(t, self.kappa())
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(self.at(t)?.alpha)
    }

    /// Terminal distribution `π`.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.vocab();
        match self.mask() {
            Some(m) => (0..n).map(|i| if i == m { 1.0 } else { 0.0 }).collect(),
            None => vec![1.0 / n as f64; n],
        }
    }

    /// `p_{t|0}(·|x0)` for a given `α`, without validation.
    pub fn conditional_probs_into(&self, alpha: f64, x0: &[f64], out: &mut [f64]) {
        match self.mask() {
            Some(m) => {
                for (o, v) in out.iter_mut().zip(x0) {
                    *o = alpha * v;
                }
                out[m] = x0[m] + (1.0 - alpha) * (1.0 - x0[m]);
            }
            None => {
                let off = (1.0 - alpha) / self.vocab() as f64;
                for (o, v) in out.iter_mut().zip(x0) {
                    *o = alpha * v + off;
                }
            }
        }
    }

    pub fn conditional_probs(&self, alpha: f64, x0: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x0.len()];
        self.conditional_probs_into(alpha, x0, &mut out);
        out
    }

    /// `p_{t|0}(x|y)` for one-hot clean token `y`.
    pub fn token_kernel(&self, alpha: f64, x: usize, y: usize) -> f64 {
        match self.mask() {
            Some(m) => {
                if y == m {
                    if x == m {
                        1.0
                    } else {
                        0.0
                    }
                } else if x == y {
                    alpha
                } else if x == m {
                    1.0 - alpha
                } else {
                    0.0
                }
            }
            None => {
                let off = (1.0 - alpha) / self.vocab() as f64;
                if x == y {
                    alpha + off
                } else {
                    off
                }
            }
        }
    }

    /// `exp(σ̄_t Q) x0` using the closed forms.
    pub fn conditional_distribution(&self, t: f64, x0: &SimplexVec) -> Result<SimplexVec> {
        if x0.len() != self.vocab() {
            return Err(Error::Shape(format!(
                "simplex of length {} for vocabulary {}",
                x0.len(),
                self.vocab()
            )));
        }
        let tp = self.at(t)?;
        if t == 0.0 {
            return Ok(x0.clone());
        }
        SimplexVec::new(self.conditional_probs(tp.alpha, x0.values()))
    }

    /// Categorical draw from `p_{t|0}(·|x0)` for a clean token `x0`.
    pub fn sample_xt<R: Rng + ?Sized>(&self, t: f64, x0: usize, rng: &mut R) -> Result<usize> {
        if x0 >= self.vocab() {
            return Err(Error::Domain(format!("token {x0} outside vocabulary {}", self.vocab())));
        }
        let tp = self.at(t)?;
        let mut onehot = vec![0.0; self.vocab()];
        onehot[x0] = 1.0;
        let probs = self.conditional_probs(tp.alpha, &onehot);
        Ok(sample_categorical(&probs, rng))
    }

    /// `σ_t Q[x][y]`: forward rate from `y` into `x` at time `t`.
    pub fn forward_rate(&self, tp: &TimePoint, x: usize, y: usize) -> f64 {
        tp.sigma * self.matrix.entry(x, y)
    }

    /// Reverse rate from `x` to `y` given the marginal ratio `p_t(y)/p_t(x)`.
    pub fn reverse_rate_entry(&self, t: f64, y: usize, x: usize, ratio: f64) -> Result<f64> {
        let tp = self.at(t)?;
        self.matrix.reverse_rate(tp.sigma, y, x, ratio)
    }

    /// Closed-form `exp(σ̄_t Q)` as a column-stochastic matrix.
    pub fn transition_matrix(&self, t: f64) -> Result<SquareMatrix> {
        let tp = self.at(t)?;
        let n = self.vocab();
        let mut m = SquareMatrix::zeros(n);
        for y in 0..n {
            for x in 0..n {
                m.set(x, y, self.token_kernel(tp.alpha, x, y));
            }
        }
        Ok(m)
    }
}

/// Probability vector on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVec(Vec<f64>);

impl SimplexVec {
    /// Validates and renormalizes small drift; rejects anything further off.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidSimplex("empty vector".into()));
        }
        for v in values.iter_mut() {
            if !v.is_finite() || *v < -SIMPLEX_NEG_TOL {
                return Err(Error::InvalidSimplex(format!("entry {v} is negative or non-finite")));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() >= SIMPLEX_SUM_TOL {
            return Err(Error::InvalidSimplex(format!("entries sum to {sum}")));
        }
        if sum != 1.0 {
            for v in values.iter_mut() {
                *v /= sum;
            }
        }
        Ok(Self(values))
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Inverse-CDF categorical draw; tolerates tiny normalization drift.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn absorbing_matrix_structure() {
        let q = RateMatrix::build(RateKind::Absorbing, 3, Some(2)).unwrap();
        assert_eq!(q.entry(2, 0), 1.0);
        assert_eq!(q.entry(0, 0), -1.0);
        assert_eq!(q.entry(2, 2), 0.0);
        let d = q.to_dense();
        for j in 0..3 {
            assert_eq!((0..3).map(|i| d.get(i, j)).sum::<f64>(), 0.0);
        }
    }

    #[test]
    fn uniform_matrix_and_vocab_errors() {
        let q = RateMatrix::build(RateKind::Uniform, 2, None).unwrap();
        assert_eq!(q.to_dense().as_slice(), &[-1.0, 1.0, 1.0, -1.0]);
        assert!(matches!(
            RateMatrix::build(RateKind::Uniform, 1, None),
            Err(Error::InvalidVocabulary(_))
        ));
        assert!(matches!(
            RateMatrix::build(RateKind::Absorbing, 3, Some(3)),
            Err(Error::InvalidMask(_))
        ));
    }

    #[test]
    fn dense_rejects_bad_columns() {
        let m = SquareMatrix::from_rows(2, vec![-1.0, 0.5, 1.0, -1.0]).unwrap();
        assert!(RateMatrix::dense(m).is_err());
    }

    #[test]
    fn log_linear_schedule_values() {
        let s = NoiseSchedule::log_linear(1e-3);
        assert_eq!(s.cumulative_sigma(0.0, 1.0).unwrap(), 0.0);
        assert!((s.cumulative_sigma(1.0, 1.0).unwrap() - 6.907755278982137).abs() < 1e-12);
        let s0 = NoiseSchedule::log_linear(0.0);
        let sb = s0.cumulative_sigma(0.5, 1.0).unwrap();
        assert!(((-sb).exp() - 0.5).abs() < 1e-15);
        assert!(s.cumulative_sigma(1.5, 1.0).is_err());
    }

    #[test]
    fn schedule_derivatives_match_differences() {
        for kind in [ScheduleKind::LogLinear, ScheduleKind::LinearAlpha] {
            let p = DiffusionProcess::uniform(4, NoiseSchedule { kind, eps: 1e-3 }).unwrap();
            let h = 1e-6;
            let t = 0.37;
            let a = p.at(t).unwrap();
            let (lo, hi) = (p.at(t - h).unwrap(), p.at(t + h).unwrap());
            assert!(((hi.sigma_bar - lo.sigma_bar) / (2.0 * h) - a.sigma).abs() < 1e-7);
            assert!(((hi.alpha - lo.alpha) / (2.0 * h) - a.alpha_prime).abs() < 1e-7);
            assert!((a.alpha - (-4.0 * a.sigma_bar).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn conditional_examples() {
        let p = DiffusionProcess::absorbing(3, NoiseSchedule::log_linear(0.0)).unwrap();
        assert_eq!(p.conditional_probs(0.5, &[1.0, 0.0, 0.0]), vec![0.5, 0.0, 0.5]);
        let u = DiffusionProcess::uniform(4, NoiseSchedule::log_linear(0.0)).unwrap();
        assert_eq!(u.conditional_probs(0.5, &[0.0, 1.0, 0.0, 0.0]), vec![0.125, 0.625, 0.125, 0.125]);
        let x0 = SimplexVec::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(p.conditional_distribution(0.0, &x0).unwrap(), x0);
    }

    #[test]
    fn simplex_tolerance_policy() {
        let v = SimplexVec::new(vec![0.5, 0.5 + 5e-10]).unwrap();
        assert_eq!(v.values().iter().sum::<f64>(), 1.0);
        assert!(SimplexVec::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexVec::new(vec![1.1, -0.1]).is_err());
    }

    #[test]
    fn sample_xt_extremes_and_frequency() {
        let p = DiffusionProcess::absorbing(3, NoiseSchedule::log_linear(0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(p.sample_xt(0.0, 1, &mut rng).unwrap(), 1);
            assert_eq!(p.sample_xt(1.0, 1, &mut rng).unwrap(), 2);
        }
        let n = 100_000;
        let masked = (0..n).filter(|_| p.sample_xt(0.5, 0, &mut rng).unwrap() == 2).count();
        assert!((masked as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn reverse_rate_examples() {
        let q = RateMatrix::build(RateKind::Absorbing, 2, Some(1)).unwrap();
        // p_t = [α, 1−α] with α = 0.5, σ_t = 1: unmasking rate m → a.
        assert_eq!(q.reverse_rate(1.0, 0, 1, 0.5 / 0.5).unwrap(), 1.0);
        assert_eq!(q.reverse_rate(1.0, 0, 1, 0.0).unwrap(), 0.0);
        assert!(matches!(q.reverse_rate(1.0, 0, 1, -1.0), Err(Error::InvalidRatio(_))));
    }

    #[test]
    fn matrix_exponential_examples() {
        let z = RateMatrix::dense(SquareMatrix::zeros(3)).unwrap();
        assert_eq!(dense_matrix_exponential(&z, 2.0).unwrap(), SquareMatrix::identity(3));
        let q = RateMatrix::build(RateKind::Absorbing, 3, Some(2)).unwrap();
        let e = dense_matrix_exponential(&q, 2f64.ln()).unwrap();
        assert!(e.max_abs_diff(&q.closed_form_exponential(2f64.ln()).unwrap()) < 1e-12);
        assert!((e.get(0, 0) - 0.5).abs() < 1e-12 && (e.get(2, 0) - 0.5).abs() < 1e-12);
        let u = RateMatrix::build(RateKind::Uniform, 4, None).unwrap();
        let sb = 2f64.ln() / 4.0;
        let e = dense_matrix_exponential(&u, sb).unwrap();
        assert!((e.get(1, 1) - 0.625).abs() < 1e-12 && (e.get(0, 1) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn semigroup_property() {
        for p in [
            DiffusionProcess::absorbing(4, NoiseSchedule::default()).unwrap(),
            DiffusionProcess::uniform(4, NoiseSchedule::default()).unwrap(),
        ] {
            let (s, t) = (0.3, 0.8);
            let ks = p.matrix().closed_form_exponential(p.cumulative_sigma(s).unwrap()).unwrap();
            let dsig = p.cumulative_sigma(t).unwrap() - p.cumulative_sigma(s).unwrap();
            let kd = p.matrix().closed_form_exponential(dsig).unwrap();
            let kt = p.transition_matrix(t).unwrap();
            assert!(ks.matmul(&kd).max_abs_diff(&kt) < 1e-12);
        }
    }
}
