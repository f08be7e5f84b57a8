use dlm_core::loss::LossKind;
use dlm_core::oracle::*;
use dlm_core::process::{DiffusionProcess, NoiseSchedule, ProcessKind};
use dlm_core::sampler::{Denoiser, OutputKind};
use dlm_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ORDER: usize = 32;

fn process(kind: ProcessKind, n: usize) -> DiffusionProcess {
    DiffusionProcess::for_data(kind, n, NoiseSchedule::log_linear(0.0)).unwrap()
}

fn settings() -> [(ProcessKind, LossKind); 3] {
    [
        (ProcessKind::Absorbing, LossKind::Mdlm),
        (ProcessKind::Absorbing, LossKind::Sedd),
        (ProcessKind::Uniform, LossKind::Udlm),
    ]
}

fn noisy_states(p: &DiffusionProcess, length: usize) -> Vec<Vec<usize>> {
    enumerate_space(p.vocab(), length).unwrap()
}

/// Oracle outputs multiplied by a deterministic positive factor.
struct Perturbed<'a> {
    inner: &'a OracleModel,
    seed: u64,
    scale: f64,
}

fn hash(mut z: u64) -> f64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

impl Denoiser for Perturbed<'_> {
    fn output_kind(&self) -> OutputKind {
        self.inner.output_kind()
    }

    fn predict(&self, tokens: &[usize], length: usize, t: f64) -> Result<Vec<f64>> {
        let mut out = self.inner.predict(tokens, length, t)?;
        let v = self.inner.process.vocab();
        for (r, row) in out.chunks_mut(v).enumerate() {
            let key = tokens[r / length * length..(r / length + 1) * length]
                .iter()
                .fold(self.seed ^ (r % length) as u64, |h, &x| h.wrapping_mul(31).wrapping_add(x as u64 + 1));
            for (y, o) in row.iter_mut().enumerate() {
                *o *= (self.scale * hash(key.wrapping_mul(97).wrapping_add(y as u64))).exp();
            }
            if self.output_kind() == OutputKind::Clean {
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|o| *o /= z);
            }
        }
        Ok(out)
    }
}

#[test]
fn point_mass_posterior_is_the_sequence() {
    let seq = [1, 0];
    let d = ToyDistribution::point_mass(2, 2, &seq).unwrap();
    for kind in [ProcessKind::Absorbing, ProcessKind::Uniform] {
        let p = process(kind, 2);
        let oracle = OracleModel::new(d.clone(), p.clone(), OracleKind::Posterior).unwrap();
        for x_t in noisy_states(&p, 2) {
            let Ok(rows) = oracle.predict_one(&x_t, 0.6) else { continue };
            let v = p.vocab();
            for (l, &x0) in seq.iter().enumerate() {
                assert!((rows[l * v + x0] - 1.0).abs() < 1e-15, "{x_t:?}");
            }
        }
    }
}

#[test]
fn score_oracle_matches_marginal_ratios() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [ProcessKind::Absorbing, ProcessKind::Uniform] {
        let p = process(kind, 3);
        let d = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
        let oracle = OracleModel::new(d.clone(), p.clone(), OracleKind::Score).unwrap();
        let t = 0.37;
        let v = p.vocab();
        for x_t in noisy_states(&p, 2) {
            let base = exact_marginal(&d, &p, t, &x_t).unwrap();
            let rows = oracle.predict_one(&x_t, t).unwrap();
            for l in 0..2 {
                for y in 0..v {
                    let mut z = x_t.clone();
                    z[l] = y;
                    let ratio = exact_marginal(&d, &p, t, &z).unwrap() / base;
                    assert!((rows[l * v + y] - ratio).abs() <= 1e-12 * ratio.max(1.0), "{x_t:?} {l} {y}");
                }
            }
        }
    }
}

#[test]
fn masked_nelbo_is_stable_under_refinement() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = process(ProcessKind::Absorbing, 3);
    let d = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
    let oracle = exact_optimal_fake(&d, &p, LossKind::Mdlm).unwrap();
    let a = exact_nelbo(&d, &oracle, &p, LossKind::Mdlm, 16, false).unwrap();
    let b = exact_nelbo(&d, &oracle, &p, LossKind::Mdlm, 64, false).unwrap();
    assert!((a - b).abs() < 1e-8, "{a} {b}");
    assert!(matches!(exact_nelbo(&d, &oracle, &p, LossKind::Mdlm, 8, false), Err(Error::Config(_))));
}

#[test]
fn bound_is_tight_at_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (kind, loss) in settings() {
        let p = process(kind, 3);
        let d = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
        let entropy: f64 = -d.probs().iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
        let oracle = exact_optimal_fake(&d, &p, loss).unwrap();
        let v = exact_nelbo(&d, &oracle, &p, loss, ORDER, true).unwrap();
        assert!((v - entropy).abs() < 1e-9, "{loss:?}: {v} vs {entropy}");
    }
}

#[test]
fn nelbo_is_additive_over_independent_positions() {
    let m = vec![0.6, 0.3, 0.1];
    let one = ToyDistribution::product(3, std::slice::from_ref(&m)).unwrap();
    let two = ToyDistribution::product(3, &[m.clone(), m]).unwrap();
    for (kind, loss) in settings() {
        let p = process(kind, 3);
        let a = exact_nelbo(&one, &exact_optimal_fake(&one, &p, loss).unwrap(), &p, loss, ORDER, false).unwrap();
        let b = exact_nelbo(&two, &exact_optimal_fake(&two, &p, loss).unwrap(), &p, loss, ORDER, false).unwrap();
        assert!((2.0 * a - b).abs() < 1e-9, "{loss:?}: {a} {b}");
    }
}

#[test]
fn optimal_fake_beats_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (kind, loss) in settings() {
        let p = process(kind, 3);
        let d = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
        let oracle = exact_optimal_fake(&d, &p, loss).unwrap();
        let best = exact_nelbo(&d, &oracle, &p, loss, ORDER, false).unwrap();
        for seed in 0..6 {
            let bad = Perturbed { inner: &oracle, seed, scale: 0.05 };
            let v = exact_nelbo(&d, &bad, &p, loss, ORDER, false).unwrap();
            assert!(v > best, "{loss:?} seed {seed}: {v} <= {best}");
        }
    }
}

#[test]
fn inverse_loss_bounds_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (kind, loss) in settings() {
        let p = process(kind, 3);
        let p_star = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
        let teacher = exact_optimal_fake(&p_star, &p, loss).unwrap();
        let at_star = exact_inverse_loss(&p_star, &teacher, &p, loss, ORDER).unwrap();
        assert!(at_star.abs() <= 1e-8, "{loss:?}: {at_star}");
        for _ in 0..5 {
            let p_theta = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
            let kl = exact_kl(&p_theta, &p_star).unwrap();
            let v = exact_inverse_loss(&p_theta, &teacher, &p, loss, ORDER).unwrap();
            assert!(v >= kl - 1e-9 && kl >= 0.0, "{loss:?}: {v} < {kl}");
        }
        let delta = ToyDistribution::point_mass(3, 2, &[2, 1]).unwrap();
        assert!(exact_inverse_loss(&delta, &teacher, &p, loss, ORDER).unwrap() > 1e-3);
    }
}

#[test]
fn relaxed_kind_uses_uniform_state_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = process(ProcessKind::Uniform, 3);
    let p_star = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
    let p_theta = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
    let t_u = exact_optimal_fake(&p_star, &p, LossKind::Udlm).unwrap();
    let t_d = exact_optimal_fake(&p_star, &p, LossKind::Duo).unwrap();
    let a = exact_inverse_loss(&p_theta, &t_u, &p, LossKind::Udlm, ORDER).unwrap();
    let b = exact_inverse_loss(&p_theta, &t_d, &p, LossKind::Duo, ORDER).unwrap();
    assert_eq!(a, b);
}

#[test]
fn score_and_masked_minimizers_agree_on_absorbing() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = process(ProcessKind::Absorbing, 3);
    let v = p.vocab();
    let m = p.mask().unwrap();
    for _ in 0..3 {
        let d = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
        let score = exact_optimal_fake(&d, &p, LossKind::Sedd).unwrap();
        let post = exact_optimal_fake(&d, &p, LossKind::Mdlm).unwrap();
        let t = 0.43;
        for x_t in noisy_states(&p, 2) {
            let (Ok(s), Ok(q)) = (score.predict_one(&x_t, t), post.predict_one(&x_t, t)) else { continue };
            for l in (0..2).filter(|&l| x_t[l] == m) {
                let row: Vec<f64> = (0..v).filter(|&y| y != m).map(|y| s[l * v + y]).collect();
                let z: f64 = row.iter().sum();
                let tv: f64 = 0.5 * row.iter().enumerate().map(|(y, r)| (r / z - q[l * v + y]).abs()).sum::<f64>();
                assert!(tv < 1e-12, "{x_t:?}: {tv}");
            }
        }
    }
}

#[test]
fn size_cap_is_enforced() {
    assert!(matches!(ToyDistribution::uniform(10, 8), Err(Error::InstanceTooLarge { .. })));
    assert!(matches!(state_count(9, 7), Err(Error::InstanceTooLarge { .. })));
    assert_eq!(state_count(9, 6).unwrap(), 531_441);
}

#[test]
fn posterior_distance_vanishes_at_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let times = [0.1, 0.5, 0.9];
    for kind in [ProcessKind::Absorbing, ProcessKind::Uniform] {
        let p = process(kind, 3);
        let d = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
        let oracle = exact_denoiser(&d, &p).unwrap();
        let zero = expected_posterior_tv(&d, &oracle, &p, oracle.kind, &times).unwrap();
        assert!(zero < 1e-12, "{kind:?}: {zero}");
        let bad = Perturbed { inner: &oracle, seed: 1, scale: 0.5 };
        let tv = expected_posterior_tv(&d, &bad, &p, oracle.kind, &times).unwrap();
        assert!(tv > 1e-3 && tv <= 1.0, "{kind:?}: {tv}");
    }
    let p = process(ProcessKind::Absorbing, 3);
    let d = ToyDistribution::uniform(3, 2).unwrap();
    let score = OracleModel::new(d.clone(), p.clone(), OracleKind::Score).unwrap();
    assert!(matches!(expected_posterior_tv(&d, &score, &p, OracleKind::Posterior, &times), Err(Error::Config(_))));
}
