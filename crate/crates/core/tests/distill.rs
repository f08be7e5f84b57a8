use dlm_core::autodiff::Tape;
use dlm_core::distill::*;
use dlm_core::loss::{one_hot_rows, token_integrand, LossConfig, LossKind, ModelRef, Objective};
use dlm_core::model::{init_denoiser, param_gradient_check, DenoiserParams, ModelConfig};
use dlm_core::optim::AdamWConfig;
use dlm_core::oracle::{exact_kl, exact_optimal_fake, OracleModel, ToyDistribution};
use dlm_core::process::{DiffusionProcess, NoiseSchedule, ProcessKind};
use dlm_core::train::DataSource;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 5;
const L: usize = 3;

fn process(kind: ProcessKind) -> DiffusionProcess {
    DiffusionProcess::for_data(kind, N, NoiseSchedule::default()).unwrap()
}

fn cases() -> [(LossKind, ProcessKind); 3] {
    [(LossKind::Mdlm, ProcessKind::Absorbing), (LossKind::Sedd, ProcessKind::Absorbing), (LossKind::Duo, ProcessKind::Uniform)]
}

fn jitter(p: &mut DenoiserParams, scale: f64, rng: &mut ChaCha8Rng) {
    for t in p.tensors.iter_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.gen_range(-scale..scale));
    }
}

fn setup(loss: LossKind, kind: ProcessKind, seed: u64) -> (Objective, DistillState, DataSource) {
    let p = process(kind);
    let mut cfg = LossConfig::new(loss);
    cfg.n_time_samples = 2;
    let obj = Objective::new(cfg, p.clone()).unwrap();
    let mc = ModelConfig { d: 16, blocks: 1, heads: 2, ..ModelConfig::new(p.vocab(), L, p.mask()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = init_denoiser(&mc, loss.parameterization(), &mut rng).unwrap();
    let data = ToyDistribution::dirichlet(N, L, &mut rng).unwrap();
    (obj, DistillState::new(teacher), DataSource::Toy(data))
}

fn adam(lr: f64) -> AdamWConfig {
    AdamWConfig { lr, warmup_steps: 0, ..AdamWConfig::default() }
}

#[test]
fn matching_fake_cancels_exactly() {
    for (loss, kind) in cases() {
        let (obj, mut state, src) = setup(loss, kind, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        jitter(&mut state.student, 0.2, &mut rng);
        let input = sampling_func(&src, &obj, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let student = state.student.bind(&mut tape, true).unwrap();
        let diff = student_objective(&mut tape, &state, &student, &obj, &input, &mut rng).unwrap();
        assert_eq!(tape.scalar(diff), 0.0, "{loss:?}");
        let grads = tape.backward(diff).unwrap();
        for &v in &student.vars {
            assert!(grads.wrt(v).iter().all(|&g| g == 0.0), "{loss:?}");
        }
    }
}

#[test]
fn student_rows_are_simplex_and_start_at_teacher() {
    for (loss, kind) in cases() {
        let (obj, state, src) = setup(loss, kind, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = sampling_func(&src, &obj, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = state.student.bind(&mut tape, false).unwrap();
        let rows = student_forward_as_data(&mut tape, &state.student, &bound, &input).unwrap();
        let v = obj.process.vocab();
        for row in tape.value(rows).chunks(v) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&r| r >= 0.0));
            if let Some(m) = obj.process.mask() {
                assert_eq!(row[m], 0.0);
            }
        }
        if input.soft.is_none() {
            let teacher = state.teacher.predict_simplex(&input.tokens, &input.times).unwrap();
            assert_eq!(tape.value(rows), teacher.as_slice());
        }
    }
}

#[test]
fn student_objective_gradient_matches_finite_differences() {
    for (loss, kind) in cases() {
        let (obj, mut state, src) = setup(loss, kind, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        jitter(&mut state.student, 0.3, &mut rng);
        jitter(&mut state.fake, 0.3, &mut rng);
        let input = sampling_func(&src, &obj, 2, &mut rng).unwrap();
        let f = |p: &DenoiserParams, tape: &mut Tape, b: &_| {
            let mut s = state.clone();
            s.student = p.clone();
            student_objective(tape, &s, b, &obj, &input, &mut ChaCha8Rng::seed_from_u64(7))
        };
        let err = param_gradient_check(&state.student, f, 1e-3, 100, &mut rng).unwrap();
        assert!(err < 1e-5, "{loss:?}: {err}");
    }
}

#[test]
fn mask_fraction_matches_schedule() {
    let (obj, _, _) = setup(LossKind::Mdlm, ProcessKind::Absorbing, 8);
    let src = DataSource::Toy(ToyDistribution::uniform(N, 1).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = sampling_func(&src, &obj, 100_000, &mut rng).unwrap();
    let m = obj.process.mask().unwrap();
    let frac = input.tokens.iter().filter(|&&x| x == m).count() as f64 / 1e5;
    let grid = 100_000;
    let expect: f64 = (0..grid).map(|k| 1.0 - obj.process.alpha((k as f64 + 0.5) / grid as f64).unwrap()).sum::<f64>() / grid as f64;
    assert!((frac - expect).abs() < 0.01, "{frac} vs {expect}");
    assert!(input.times.iter().all(|t| (0.0..1.0).contains(t)));
}

#[test]
fn fake_loss_is_teacher_loss_on_student_outputs() {
    let (obj, state, src) = setup(LossKind::Mdlm, ProcessKind::Absorbing, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = sampling_func(&src, &obj, 4, &mut rng).unwrap();
    let mut s = state.clone();
    let got = fake_update(&mut s, &obj, &adam(1e-3), &input, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let mut tape = Tape::new();
    let sb = state.student.bind(&mut tape, false).unwrap();
    let x0 = student_forward_as_data(&mut tape, &state.student, &sb, &input).unwrap();
    let tb = state.teacher.bind(&mut tape, false).unwrap();
    let teacher = ModelRef { params: &state.teacher, bound: &tb };
    let want = obj.loss(&mut tape, teacher, x0, L, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    assert_eq!(got.loss, tape.scalar(want));
}

#[test]
fn updates_touch_only_their_own_model() {
    for (loss, kind) in cases() {
        let (obj, mut state, src) = setup(loss, kind, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        jitter(&mut state.student, 0.2, &mut rng);
        let input = sampling_func(&src, &obj, 4, &mut rng).unwrap();
        let mut s = state.clone();
        fake_update(&mut s, &obj, &adam(1e-2), &input, &mut rng).unwrap();
        assert_ne!(s.fake, state.fake);
        assert_eq!((&s.teacher, &s.student, &s.student_ema), (&state.teacher, &state.student, &state.student_ema));
        let before = s.clone();
        let opt = OptimizerConfig { student: adam(1e-2), ..OptimizerConfig::default() };
        student_update(&mut s, &obj, &opt, &input, &mut rng).unwrap();
        assert_ne!(s.student, before.student);
        assert_eq!((&s.teacher, &s.fake), (&before.teacher, &before.fake));
    }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let (obj, mut state, src) = setup(LossKind::Sedd, ProcessKind::Absorbing, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    jitter(&mut state.fake, 0.2, &mut rng);
    let input = sampling_func(&src, &obj, 4, &mut rng).unwrap();
    let before = state.clone();
    fake_update(&mut state, &obj, &adam(0.0), &input, &mut rng).unwrap();
    let opt = OptimizerConfig { student: adam(0.0), ..OptimizerConfig::default() };
    student_update(&mut state, &obj, &opt, &input, &mut rng).unwrap();
    assert_eq!(state.fake, before.fake);
    assert_eq!(state.student, before.student);
}

fn config(loss: LossKind) -> DistillConfig {
    let mut c = DistillConfig::new(LossConfig::new(loss));
    c.batch = 4;
    c.seed = 21;
    c.optimizer.fake = adam(1e-2);
    c.optimizer.student = adam(1e-2);
    c
}

#[test]
fn zero_steps_keep_the_teacher() {
    let (obj, mut state, src) = setup(LossKind::Mdlm, ProcessKind::Absorbing, 17);
    let teacher = state.teacher.clone();
    let mut calls = 0;
    run_distillation(&mut state, &obj.process, &config(LossKind::Mdlm), &src, 0, |_, _| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 0);
    assert_eq!(state.student, teacher);
    assert_eq!(state.fake, teacher);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    for (loss, kind) in cases() {
        let (obj, start, src) = setup(loss, kind, 18);
        let cfg = config(loss);
        let mut log_a = Vec::new();
        let mut a = start.clone();
        run_distillation(&mut a, &obj.process, &cfg, &src, 6, |_, r| {
            log_a.push(*r);
            Ok(())
        })
        .unwrap();
        let mut log_b = Vec::new();
        let mut b = start.clone();
        run_distillation(&mut b, &obj.process, &cfg, &src, 3, |_, r| {
            log_b.push(*r);
            Ok(())
        })
        .unwrap();
        let mut resumed = b.clone();
        run_distillation(&mut resumed, &obj.process, &cfg, &src, 6, |_, r| {
            log_b.push(*r);
            Ok(())
        })
        .unwrap();
        assert_eq!(log_a, log_b, "{loss:?}");
        assert_eq!(a, resumed, "{loss:?}");
        assert_eq!(a.teacher, start.teacher);
        assert_ne!(a.student, start.student);
    }
}

#[test]
fn mismatched_models_are_rejected() {
    let (obj, mut state, src) = setup(LossKind::Mdlm, ProcessKind::Absorbing, 19);
    let sedd = config(LossKind::Sedd);
    assert!(run_distillation(&mut state.clone(), &obj.process, &sedd, &src, 1, |_, _| Ok(())).is_err());
    let short = DataSource::Toy(ToyDistribution::uniform(N, L - 1).unwrap());
    assert!(run_distillation(&mut state.clone(), &obj.process, &config(LossKind::Mdlm), &short, 1, |_, _| Ok(())).is_err());
    state.fake.tensors.pop();
    assert!(run_distillation(&mut state, &obj.process, &config(LossKind::Mdlm), &src, 1, |_, _| Ok(())).is_err());
}

/// Monte Carlo student objective with oracle teacher and fake, clean samples from `p_theta`.
fn oracle_objective(
    p_theta: &ToyDistribution,
    teacher: &OracleModel,
    fake: &OracleModel,
    p: &DiffusionProcess,
    loss: LossKind,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let v = p.vocab();
    let mut stats = (0.0, 0.0);
    for _ in 0..draws {
        let x0 = p_theta.sample(rng);
        let t: f64 = rng.gen_range(1e-6..1.0);
        let tp = p.at(t).unwrap();
        let x_t: Vec<usize> = x0.iter().map(|&x| p.sample_xt(t, x, rng).unwrap()).collect();
        let (a, b) = (teacher.predict_one(&x_t, t).unwrap(), fake.predict_one(&x_t, t).unwrap());
        let rows = one_hot_rows(&x0, v);
        let mut d = 0.0;
        for l in 0..x0.len() {
            let row = &rows[l * v..(l + 1) * v];
            d += token_integrand(loss, p, &tp, x_t[l], &a[l * v..(l + 1) * v], row, false).unwrap();
            d -= token_integrand(loss, p, &tp, x_t[l], &b[l * v..(l + 1) * v], row, false).unwrap();
        }
        stats.0 += d;
        stats.1 += d * d;
    }
    let mean = stats.0 / draws as f64;
    let se = ((stats.1 / draws as f64 - mean * mean) / draws as f64).sqrt();
    (mean, se)
}

#[test]
fn oracle_fake_objective_bounds_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for (loss, kind) in [(LossKind::Mdlm, ProcessKind::Absorbing), (LossKind::Udlm, ProcessKind::Uniform)] {
        let p = DiffusionProcess::for_data(kind, 3, NoiseSchedule::log_linear(0.0)).unwrap();
        let p_star = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
        let teacher = exact_optimal_fake(&p_star, &p, loss).unwrap();
        let (at_star, se) = oracle_objective(&p_star, &teacher, &teacher, &p, loss, 2000, &mut rng);
        assert!(at_star.abs() <= 3.0 * se + 1e-12, "{loss:?}: {at_star} ± {se}");
        for _ in 0..3 {
            let p_theta = ToyDistribution::dirichlet(3, 2, &mut rng).unwrap();
            let fake = exact_optimal_fake(&p_theta, &p, loss).unwrap();
            let (mean, se) = oracle_objective(&p_theta, &teacher, &fake, &p, loss, 20_000, &mut rng);
            let kl = exact_kl(&p_theta, &p_star).unwrap();
            assert!(mean >= kl - 3.0 * se, "{loss:?}: {mean} ± {se} < {kl}");
        }
    }
}
