use dlm_core::autodiff::{finite_difference_check, Tape};
use dlm_core::duo::{argmax, duo_draw_with_noise, gaussian_noise};
use dlm_core::loss::{
    one_hot_rows, token_integrand, udlm_g, InnerDraws, LossConfig, LossKind, ModelRef, Objective,
};
use dlm_core::model::{init_denoiser, param_gradient_check, DenoiserParams, ModelConfig, ModelInput};
use dlm_core::process::{DiffusionProcess, NoiseSchedule, ProcessKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 6;
const L: usize = 4;

fn setup(kind: LossKind, process_kind: ProcessKind, seed: u64) -> (Objective, DenoiserParams) {
    let process = match process_kind {
        ProcessKind::Absorbing => DiffusionProcess::absorbing(N, NoiseSchedule::default()).unwrap(),
        ProcessKind::Uniform => DiffusionProcess::uniform(N, NoiseSchedule::default()).unwrap(),
    };
    let mut cfg = LossConfig::new(kind);
    cfg.n_time_samples = 2;
    cfg.include_constant = true;
    let obj = Objective::new(cfg, process.clone()).unwrap();
    let mc = ModelConfig { d: 16, blocks: 1, heads: 2, ..ModelConfig::new(N, L, process.mask()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_denoiser(&mc, kind.parameterization(), &mut rng).unwrap();
    for t in params.tensors.iter_mut() {
        for v in t.data.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    (obj, params)
}

fn cases() -> Vec<(LossKind, ProcessKind)> {
    vec![
        (LossKind::Sedd, ProcessKind::Absorbing),
        (LossKind::Sedd, ProcessKind::Uniform),
        (LossKind::Mdlm, ProcessKind::Absorbing),
        (LossKind::Udlm, ProcessKind::Uniform),
        (LossKind::Duo, ProcessKind::Uniform),
    ]
}

fn data(obj: &Objective, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = obj.process.data_tokens();
    (0..batch * L).map(|_| rng.gen_range(0..k)).collect()
}

/// Soft clean rows with zero mass on the mask slot.
fn soft_rows(obj: &Objective, rows: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * N);
    for _ in 0..rows {
        let mut r: Vec<f64> = (0..N).map(|_| rng.gen_range(0.05..1.0)).collect();
        if let Some(m) = obj.process.mask() {
            r[m] = 0.0;
        }
        let z: f64 = r.iter().sum();
        out.extend(r.into_iter().map(|v| v / z));
    }
    out
}

fn loss_value(obj: &Objective, params: &DenoiserParams, x0: &[f64], draws: &InnerDraws) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false).unwrap();
    let x = tape.constant(x0.to_vec(), &[x0.len() / N, N]).unwrap();
    let out = obj.evaluate(&mut tape, x, draws, &[ModelRef { params, bound: &bound }]).unwrap();
    tape.scalar(out[0])
}

/// Per-row reference built from the scalar integrands.
fn reference_value(obj: &Objective, params: &DenoiserParams, x0: &[f64], draws: &InnerDraws) -> f64 {
    let rows = draws.tokens.len();
    let times: Vec<f64> = draws.times.iter().map(|tp| tp.t).collect();
    let x0_row = |r: usize| {
        let b = r / L / draws.n_time;
        let i = b * L + r % L;
        &x0[i * N..(i + 1) * N]
    };
    let outputs = match &draws.duo {
        Some(d) => {
            let mut soft = Vec::with_capacity(rows * N);
            for r in 0..rows {
                let noise = &d.noise[r * N..(r + 1) * N];
                let draw = duo_draw_with_noise(x0_row(r), d.alpha_tilde[r / L], obj.config.tau, noise).unwrap();
                assert_eq!(draw.hard, draws.tokens[r]);
                soft.extend(draw.soft);
            }
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false).unwrap();
            let s = tape.constant(soft, &[rows, N]).unwrap();
            let out = params.forward(&mut tape, &bound, ModelInput::Simplex(s), &times).unwrap();
            tape.value(out).to_vec()
        }
        None => params.predict_tokens(&draws.tokens, &times).unwrap(),
    };
    let mut total = 0.0;
    for r in 0..rows {
        let tp = &draws.times[r / L];
        total += token_integrand(
            obj.kind(),
            &obj.process,
            tp,
            draws.tokens[r],
            &outputs[r * N..(r + 1) * N],
            x0_row(r),
            obj.config.include_constant,
        )
        .unwrap();
    }
    total / draws.times.len() as f64
}

#[test]
fn batched_losses_match_scalar_integrands() {
    for (i, (kind, pk)) in cases().into_iter().enumerate() {
        let (obj, params) = setup(kind, pk, 10 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for soft in [false, true] {
            let x0 = if soft { soft_rows(&obj, 3 * L, &mut rng) } else { one_hot_rows(&data(&obj, 3, &mut rng), N) };
            let draws = obj.draw(&x0, 3, L, &mut rng).unwrap();
            let a = loss_value(&obj, &params, &x0, &draws);
            let b = reference_value(&obj, &params, &x0, &draws);
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{kind:?} soft={soft}: {a} vs {b}");
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for (i, (kind, pk)) in cases().into_iter().enumerate() {
        let (obj, params) = setup(kind, pk, 20 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let x0 = one_hot_rows(&data(&obj, 2, &mut rng), N);
        let draws = obj.draw(&x0, 2, L, &mut rng).unwrap();
        let f = |p: &DenoiserParams, tape: &mut Tape, bound: &_| {
            let x = tape.constant(x0.clone(), &[2 * L, N])?;
            Ok(obj.evaluate(tape, x, &draws, &[ModelRef { params: p, bound }])?[0])
        };
        let err = param_gradient_check(&params, f, 1e-3, 40, &mut rng).unwrap();
        assert!(err < 1e-5, "{kind:?}/{pk:?}: relative error {err}");
    }
}

#[test]
fn soft_input_gradients_match_finite_differences() {
    for (i, (kind, pk)) in cases().into_iter().enumerate() {
        let (obj, params) = setup(kind, pk, 30 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i as u64);
        let x0 = soft_rows(&obj, 2 * L, &mut rng);
        let draws = obj.draw(&x0, 2, L, &mut rng).unwrap();
        let f = |tape: &mut Tape, x: dlm_core::autodiff::Var| {
            let bound = params.bind(tape, false)?;
            let x = tape.reshape(x, &[2 * L, N])?;
            Ok(obj.evaluate(tape, x, &draws, &[ModelRef { params: &params, bound: &bound }])?[0])
        };
        let mut coords: Vec<f64> = x0.clone();
        if let Some(m) = obj.process.mask() {
            // Keep the checked coordinates off the zero mask column.
            for r in 0..2 * L {
                coords[r * N + m] = 0.0;
            }
        }
        let err = finite_difference_check(f, &coords, 1e-3, 30, &mut rng).unwrap();
        assert!(err < 1e-5, "{kind:?}/{pk:?}: relative error {err}");
    }
}

#[test]
fn identical_models_cancel_bitwise() {
    for (i, (kind, pk)) in cases().into_iter().enumerate() {
        let (obj, params) = setup(kind, pk, 40 + i as u64);
        let copy = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + i as u64);
        let x0 = soft_rows(&obj, 3 * L, &mut rng);
        let draws = obj.draw(&x0, 3, L, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bt = params.bind(&mut tape, false).unwrap();
        let bf = copy.bind(&mut tape, false).unwrap();
        let x = tape.param(x0.clone(), &[3 * L, N]).unwrap();
        let losses = obj
            .evaluate(&mut tape, x, &draws, &[ModelRef { params: &params, bound: &bt }, ModelRef { params: &copy, bound: &bf }])
            .unwrap();
        let diff = tape.sub(losses[0], losses[1]).unwrap();
        assert_eq!(tape.scalar(diff), 0.0, "{kind:?}");
        let g = tape.backward(diff).unwrap().wrt(x);
        assert!(g.iter().all(|&v| v == 0.0), "{kind:?}: nonzero gradient");
    }
}

#[test]
fn relaxed_input_approaches_token_input_at_small_tau() {
    let (mut obj, params) = setup(LossKind::Duo, ProcessKind::Uniform, 50);
    obj.config.tau = 0.01;
    let obj = Objective::new(obj.config.clone(), obj.process.clone()).unwrap();
    let tok_obj = Objective::new(LossConfig { kind: LossKind::Udlm, ..obj.config.clone() }, obj.process.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x0 = one_hot_rows(&data(&obj, 4, &mut rng), N);
    let mut draws = obj.draw(&x0, 4, L, &mut rng).unwrap();
    // Redraw noise at near-ties so τ = 0.01 is sharp on every row.
    let d = draws.duo.as_mut().unwrap();
    for r in 0..draws.tokens.len() {
        let at = d.alpha_tilde[r / L];
        let b = r / L / draws.n_time;
        let row = &x0[(b * L + r % L) * N..(b * L + r % L + 1) * N];
        loop {
            let w: Vec<f64> = (0..N).map(|y| at * row[y] + (1.0 - at * at).sqrt() * d.noise[r * N + y]).collect();
            let hard = argmax(&w);
            let mut sorted = w.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted[0] - sorted[1] > 0.2 {
                draws.tokens[r] = hard;
                break;
            }
            d.noise[r * N..(r + 1) * N].copy_from_slice(&gaussian_noise(N, &mut rng));
        }
    }
    let relaxed = loss_value(&obj, &params, &x0, &draws);
    let hard = loss_value(&tok_obj, &params, &x0, &InnerDraws { duo: None, ..draws.clone() });
    assert!((relaxed - hard).abs() < 1e-4, "{relaxed} vs {hard}");
}

/// Generalized KL between the reverse rates implied by two clean distributions.
fn rate_divergence(process: &DiffusionProcess, t: f64, x_t: usize, x0: &[f64], x0_hat: &[f64]) -> f64 {
    let tp = process.at(t).unwrap();
    let p = process.conditional_probs(tp.alpha, x0);
    let q = process.conditional_probs(tp.alpha, x0_hat);
    let mut total = 0.0;
    for y in 0..p.len() {
        if y == x_t {
            continue;
        }
        let r_true = process.forward_rate(&tp, x_t, y) * p[y] / p[x_t];
        let r_model = process.forward_rate(&tp, x_t, y) * q[y] / q[x_t];
        total += r_true * (r_true / r_model).ln() - r_true + r_model;
    }
    total
}

#[test]
fn uniform_integrand_is_rate_divergence() {
    let process = DiffusionProcess::uniform(2, NoiseSchedule::log_linear(0.0)).unwrap();
    let t = 1.0 - 0.5f64.sqrt();
    let tp = process.at(t).unwrap();
    assert!((tp.alpha - 0.5).abs() < 1e-12);
    let g = udlm_g(&process, &tp, 1, &[1.0, 0.0], &[0.5, 0.5]).unwrap();
    let kl = rate_divergence(&process, t, 1, &[1.0, 0.0], &[0.5, 0.5]);
    assert!(g > 0.0);
    assert!((g - kl).abs() < 1e-12, "{g} vs {kl}");
    let p5 = DiffusionProcess::uniform(5, NoiseSchedule::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let t = rng.gen_range(0.01..0.99);
        let mut a: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut b: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
        let (za, zb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        a.iter_mut().for_each(|v| *v /= za);
        b.iter_mut().for_each(|v| *v /= zb);
        let x_t = rng.gen_range(0..5);
        let g = udlm_g(&p5, &p5.at(t).unwrap(), x_t, &a, &b).unwrap();
        let kl = rate_divergence(&p5, t, x_t, &a, &b);
        assert!((g - kl).abs() < 1e-9 * kl.abs().max(1.0));
    }
}

#[test]
fn integrands_are_invariant_under_relabeling() {
    let process = DiffusionProcess::absorbing(5, NoiseSchedule::default()).unwrap();
    let uniform = DiffusionProcess::uniform(4, NoiseSchedule::default()).unwrap();
    let perm = [2, 0, 3, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let tp = process.at(rng.gen_range(0.05..0.95)).unwrap();
        let mut x0 = vec![0.0; 5];
        x0[rng.gen_range(0..4)] = 1.0;
        let mut out: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..2.0)).collect();
        out[4] = 0.0;
        let z: f64 = out.iter().sum();
        let x0_hat: Vec<f64> = out.iter().map(|v| v / z).collect();
        let permute = |v: &[f64]| {
            let mut w = v.to_vec();
            for i in 0..4 {
                w[perm[i]] = v[i];
            }
            w
        };
        let score: Vec<f64> = out.iter().map(|v| v + 0.1).collect();
        let a = token_integrand(LossKind::Sedd, &process, &tp, 4, &score, &x0, true).unwrap();
        let b = token_integrand(LossKind::Sedd, &process, &tp, 4, &permute(&score), &permute(&x0), true).unwrap();
        assert!((a - b).abs() < 1e-12);
        let a = token_integrand(LossKind::Mdlm, &process, &tp, 4, &x0_hat, &x0, false).unwrap();
        let b = token_integrand(LossKind::Mdlm, &process, &tp, 4, &permute(&x0_hat), &permute(&x0), false).unwrap();
        assert!((a - b).abs() < 1e-12);
        let tu = uniform.at(tp.t).unwrap();
        let xt = rng.gen_range(0..4);
        let a = udlm_g(&uniform, &tu, xt, &x0[..4], &x0_hat[..4]).unwrap();
        let b = udlm_g(&uniform, &tu, perm[xt], &permute(&x0)[..4], &permute(&x0_hat)[..4]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
