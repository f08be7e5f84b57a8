//! Gaussian relaxation of the uniform-state process.
//!
//! A clean one-hot `x0` is mapped to `w = α̃·x0 + √(1−α̃²)·ε`; the argmax of `w`
//! is distributed as the uniform-state conditional with rate `effective_alpha(α̃)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::quadrature::{gauss_hermite, normal_cdf, Rule};

/// Gauss–Hermite order used by default.
pub const DEFAULT_RESOLUTION: usize = 64;
const BISECTION_STEPS: usize = 64;

/// Maps between the Gaussian scale `α̃` and the discrete keep-rate `α`.
#[derive(Debug, Clone)]
pub struct DuoMap {
    n: usize,
    rule: Rule,
}

impl DuoMap {
    pub fn new(n: usize, resolution: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidVocabulary(format!("need at least 2 tokens, got {n}")));
        }
        if resolution == 0 {
            return Err(Error::Config("quadrature resolution must be positive".into()));
        }
        Ok(Self { n, rule: gauss_hermite(resolution) })
    }

    pub fn vocab(&self) -> usize {
        self.n
    }

    /// Probability that the clean coordinate wins the argmax.
    pub fn win_probability(&self, alpha_tilde: f64) -> f64 {
        let s = (1.0 - alpha_tilde * alpha_tilde).max(0.0).sqrt();
        if s == 0.0 {
            return if alpha_tilde > 0.0 { 1.0 } else { 1.0 / self.n as f64 };
        }
        let shift = alpha_tilde / s;
        let k = (self.n - 1) as i32;
        let total: f64 = self
            .rule
            .nodes
            .iter()
            .zip(&self.rule.weights)
            .map(|(&x, &w)| w * normal_cdf(std::f64::consts::SQRT_2 * x + shift).powi(k))
            .sum();
        total / std::f64::consts::PI.sqrt()
    }

    /// `α = (qN − 1)/(N − 1)` for win probability `q`.
    pub fn effective_alpha(&self, alpha_tilde: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&alpha_tilde) {
            return Err(Error::Domain(format!("alpha_tilde {alpha_tilde} outside [0, 1]")));
        }
        let n = self.n as f64;
        Ok((self.win_probability(alpha_tilde) * n - 1.0) / (n - 1.0))
    }

    /// Inverse of [`DuoMap::effective_alpha`] by bisection.
    pub fn alpha_tilde(&self, alpha: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
        }
        if alpha == 1.0 {
            return Ok(1.0);
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if self.effective_alpha(mid)? < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// `effective_alpha(α̃, N)` at the given quadrature resolution.
pub fn effective_alpha(alpha_tilde: f64, n: usize, resolution: usize) -> Result<f64> {
    DuoMap::new(n, resolution)?.effective_alpha(alpha_tilde)
}

/// One relaxed draw at a single position.
#[derive(Debug, Clone, PartialEq)]
pub struct DuoDraw {
    pub w: Vec<f64>,
    pub hard: usize,
    pub soft: Vec<f64>,
    pub alpha_tilde: f64,
}

/// Standard normal noise of length `n`.
pub fn gaussian_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `softmax(w/τ)`.
pub fn tempered_softmax(w: &[f64], tau: f64) -> Vec<f64> {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Relaxed draw from fixed noise.
pub fn duo_draw_with_noise(x0: &[f64], alpha_tilde: f64, tau: f64, noise: &[f64]) -> Result<DuoDraw> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau {tau} must be positive")));
    }
    if !(0.0..=1.0).contains(&alpha_tilde) {
        return Err(Error::Domain(format!("alpha_tilde {alpha_tilde} outside [0, 1]")));
    }
    if noise.len() != x0.len() {
        return Err(Error::Shape(format!("noise of length {} for {} tokens", noise.len(), x0.len())));
    }
    let s = (1.0 - alpha_tilde * alpha_tilde).sqrt();
    let w: Vec<f64> = x0.iter().zip(noise).map(|(&x, &e)| alpha_tilde * x + s * e).collect();
    let hard = argmax(&w);
    let soft = tempered_softmax(&w, tau);
    Ok(DuoDraw { w, hard, soft, alpha_tilde })
}

pub fn duo_draw<R: Rng + ?Sized>(x0: &[f64], alpha_tilde: f64, tau: f64, rng: &mut R) -> Result<DuoDraw> {
    let noise = gaussian_noise(x0.len(), rng);
    duo_draw_with_noise(x0, alpha_tilde, tau, &noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints() {
        for n in [2, 4, 17] {
            assert_eq!(effective_alpha(1.0, n, 64).unwrap(), 1.0);
            assert!(effective_alpha(0.0, n, 64).unwrap().abs() < 1e-6);
        }
    }

    #[test]
    fn monotone_and_invertible() {
        let map = DuoMap::new(4, 64).unwrap();
        let mut prev = -1.0;
        for i in 0..=20 {
            let a = map.effective_alpha(i as f64 / 20.0).unwrap();
            assert!(a > prev);
            prev = a;
        }
        for alpha in [0.01, 0.3, 0.77, 0.999] {
            let at = map.alpha_tilde(alpha).unwrap();
            assert!((map.effective_alpha(at).unwrap() - alpha).abs() < 1e-10);
        }
    }

    #[test]
    fn noiseless_draw_hits_clean_token() {
        let d = duo_draw_with_noise(&[0.0, 0.0, 1.0, 0.0], 0.3, 0.05, &[0.0; 4]).unwrap();
        assert_eq!(d.hard, 2);
        assert_eq!(argmax(&d.soft), 2);
    }

    #[test]
    fn sharp_temperature_is_nearly_one_hot() {
        let d = duo_draw_with_noise(&[1.0, 0.0, 0.0], 0.5, 0.01, &[0.0, 0.1, -0.3]).unwrap();
        for (i, &p) in d.soft.iter().enumerate() {
            let target = if i == d.hard { 1.0 } else { 0.0 };
            assert!((p - target).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_scale_draws_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[duo_draw(&[1.0, 0.0, 0.0], 0.0, 0.05, &mut rng).unwrap().hard] += 1;
        }
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.01);
        }
    }
}
