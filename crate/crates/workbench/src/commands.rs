//! Subcommand implementations.

use std::path::Path;
use std::time::Instant;

use dlm_core::distill::{run_distillation, DistillConfig, DistillState, OptimizerConfig};
use dlm_core::loss::{LossConfig, LossKind, ModelRef, Objective};
use dlm_core::model::{init_denoiser, DenoiserParams, ModelConfig, Parameterization};
use dlm_core::optim::AdamWConfig;
use dlm_core::oracle::{
    exact_denoiser, exact_inverse_loss, exact_kl, exact_optimal_fake, exact_sampler_distribution, expected_posterior_tv,
    OracleKind, ToyDistribution,
};
use dlm_core::process::{DiffusionProcess, ProcessKind};
use dlm_core::sampler::{
    generate, student_generate, Denoiser, Generated, NetworkDenoiser, OutputKind, PlugInScore, SamplerConfig, SamplerKind,
};
use dlm_core::train::{step_rng, train_step, DataSource, Phase, TrainState};
use dlm_core::autodiff::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{
    load_checkpoint, load_distill_state, parse_process_kind, parse_schedule, save_checkpoint, save_distill_state,
    DistillCheckpoint, ModelCheckpoint, RngState, Role,
};
use crate::cli::*;
use crate::data::{ingest_corpus, load_toy_spec, Tokenizer, TokenizerMode};
use crate::error::{CliError, CliResult};
use crate::files::{read_to_string, write_atomic};
use crate::metrics::{format_float, mean_entropy, MetricsLog, MetricsRow};
use crate::remote::{endpoint_from_env, generative_perplexity, remote_score, RemoteError};

/// Times at which the toy-mode posterior distance is averaged.
const TV_TIMES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
const NLL_CHUNK: usize = 256;

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::TrainTeacher(a) => train_teacher(&a),
        Command::Distill(a) => distill(&a),
        Command::Sample(a) => sample(&a),
        Command::Eval(a) => eval(&a),
        Command::OracleCheck(a) => oracle_check(&a),
    }
}

/// Generator for weight initialization, on a stream no training step uses.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

struct Dataset {
    source: DataSource,
    toy: Option<ToyDistribution>,
    tokenizer: Option<Tokenizer>,
    data_tokens: usize,
}

fn load_data(args: &DataArgs) -> CliResult<Dataset> {
    match (&args.toy, &args.corpus) {
        (Some(path), None) => {
            let toy = load_toy_spec(path)?;
            Ok(Dataset { data_tokens: toy.n_tokens(), source: DataSource::Toy(toy.clone()), toy: Some(toy), tokenizer: None })
        }
        (None, Some(path)) => {
            let mode = TokenizerMode::parse(&args.mode)?;
            let length = args.length.ok_or_else(|| CliError::Config("--length is required with --corpus".into()))?;
            let corpus = ingest_corpus(path, mode, length)?;
            eprintln!("corpus {}: {} windows, sha256 {}", path.display(), corpus.windows(), corpus.hash());
            Ok(Dataset {
                data_tokens: corpus.tokenizer.data_tokens(),
                source: DataSource::windows(length, corpus.tokens)?,
                toy: None,
                tokenizer: Some(corpus.tokenizer),
            })
        }
        _ => Err(CliError::Config("give exactly one of --toy or --corpus".into())),
    }
}

fn loss_config(kind: LossKind, args: &LossArgs) -> CliResult<LossConfig> {
    let cfg = LossConfig { kind, tau: args.tau, include_constant: args.include_constant, n_time_samples: args.n_time_samples };
    cfg.validate()?;
    Ok(cfg)
}

fn adamw(lr: f64, warmup: u64, weight_decay: f64) -> CliResult<AdamWConfig> {
    let cfg = AdamWConfig { lr, warmup_steps: warmup, weight_decay, ..AdamWConfig::default() };
    cfg.validate()?;
    Ok(cfg)
}

fn check_ema(decay: f64) -> CliResult<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(CliError::Config(format!("ema decay {decay} outside [0, 1)")));
    }
    Ok(())
}

fn check_batch(batch: usize) -> CliResult<()> {
    if batch == 0 {
        return Err(CliError::Config("batch must be at least 1".into()));
    }
    Ok(())
}

/// Loss whose minimizer the given head represents.
fn default_loss(param: Parameterization) -> LossKind {
    match param {
        Parameterization::Score => LossKind::Sedd,
        Parameterization::X0Subs => LossKind::Mdlm,
        Parameterization::X0Duo => LossKind::Duo,
    }
}

/// Oracle that the loss's minimizer equals, read as clean rows.
fn matching_oracle(kind: LossKind) -> OracleKind {
    match kind {
        LossKind::Sedd | LossKind::Mdlm => OracleKind::Posterior,
        LossKind::Udlm | LossKind::Duo => OracleKind::LeaveOneOut,
    }
}

fn sampler_kind(name: Option<&str>, process: &DiffusionProcess) -> CliResult<SamplerKind> {
    let kind = match name {
        Some(s) => SamplerKind::parse(s)?,
        None => match process.kind() {
            ProcessKind::Absorbing => SamplerKind::AncestralAbsorbing,
            ProcessKind::Uniform => SamplerKind::AncestralUniform,
        },
    };
    kind.check_process(process.kind())?;
    Ok(kind)
}

fn sampler_config(kind: SamplerKind, steps: usize, seed: u64) -> CliResult<SamplerConfig> {
    let cfg = SamplerConfig { kind, steps, seed };
    cfg.validate()?;
    Ok(cfg)
}

fn clock(on: bool) -> Option<Instant> {
    on.then(Instant::now)
}

fn elapsed(c: Option<Instant>) -> Option<u128> {
    c.map(|t| t.elapsed().as_millis())
}

/// Teacher read through the view a sampler needs.
fn teacher_view<'a>(params: &'a DenoiserParams, process: &DiffusionProcess, needs: OutputKind) -> CliResult<NetworkDenoiser<'a>> {
    match (needs, params.parameterization, process.kind()) {
        (OutputKind::Score, Parameterization::Score, _) => Ok(NetworkDenoiser::native(params)),
        (OutputKind::Clean, Parameterization::Score, ProcessKind::Uniform) => {
            Err(CliError::Config("a uniform-state score model has no clean-data view; use the euler-score sampler".into()))
        }
        _ => Ok(NetworkDenoiser::clean(params)),
    }
}

fn generate_from(ckpt: &ModelCheckpoint, config: &SamplerConfig, count: usize, rng: &mut ChaCha8Rng) -> CliResult<Generated> {
    let (params, process) = (&ckpt.params, &ckpt.process);
    if ckpt.role == Role::Student {
        return Ok(student_generate(params, process, config, count, rng)?);
    }
    let view = teacher_view(params, process, config.kind.needs())?;
    let length = params.config.length;
    Ok(match (config.kind.needs(), view.output_kind()) {
        (OutputKind::Score, OutputKind::Clean) => generate(&PlugInScore { inner: &view, process }, process, config, count, length, rng)?,
        _ => generate(&view, process, config, count, length, rng)?,
    })
}

/// Exact terminal law of `config` driven by a checkpointed model.
fn exact_law(ckpt: &ModelCheckpoint, config: &SamplerConfig) -> CliResult<ToyDistribution> {
    let view = match ckpt.role {
        Role::Student => NetworkDenoiser::clean(&ckpt.params),
        _ => teacher_view(&ckpt.params, &ckpt.process, OutputKind::Clean)?,
    };
    Ok(exact_sampler_distribution(&view, &ckpt.process, config, ckpt.params.config.length)?)
}

fn kl_or_infinite(p: &ToyDistribution, q: &ToyDistribution) -> CliResult<f64> {
    match exact_kl(p, q) {
        Ok(v) => Ok(v),
        Err(dlm_core::Error::InfiniteKl) => Ok(f64::INFINITY),
        Err(e) => Err(e.into()),
    }
}

fn write_metrics(path: Option<&Path>, log: &MetricsLog) -> CliResult<()> {
    match path {
        Some(p) => log.write(p),
        None => Ok(()),
    }
}

fn train_teacher(a: &TrainArgs) -> CliResult<()> {
    let loss = LossKind::parse(&a.loss)?;
    let kind = parse_process_kind(&a.process.process)?;
    let param = loss.parameterization();
    loss.check(param, kind)?;
    let schedule = parse_schedule(&a.process.schedule, a.process.schedule_eps)?;
    let loss_cfg = loss_config(loss, &a.loss_opts)?;
    let opt = adamw(a.lr, a.warmup, a.weight_decay)?;
    check_ema(a.ema_decay)?;
    check_batch(a.batch)?;

    let data = load_data(&a.data)?;
    let process = DiffusionProcess::for_data(kind, data.data_tokens, schedule)?;
    let config = ModelConfig {
        d: a.model.d,
        blocks: a.model.blocks,
        heads: a.model.heads,
        dropout: 0.0,
        vocab: process.vocab(),
        length: data.source.length(),
        mask: process.mask(),
        time_conditioning: !a.model.no_time_conditioning,
        temperature: a.model.temperature,
    };
    config.validate(param)?;
    let objective = Objective::new(loss_cfg, process.clone())?;
    let mut state = TrainState::new(init_denoiser(&config, param, &mut init_rng(a.seed))?);
    let pick = |s: &TrainState| if a.save_ema { s.ema.clone() } else { s.params.clone() };
    let posterior_tv = |p: &DenoiserParams| -> CliResult<Option<f64>> {
        match &data.toy {
            Some(toy) => {
                let view = NetworkDenoiser::clean(p);
                Ok(Some(expected_posterior_tv(toy, &view, &process, matching_oracle(loss), &TV_TIMES)?))
            }
            None => Ok(None),
        }
    };

    let started = clock(a.output.wall_time);
    let mut log = MetricsLog::new();
    let every = a.log_every.max(1);
    for _ in 0..a.steps {
        let r = train_step(&mut state, &objective, &opt, a.ema_decay, &data.source, a.batch, a.seed)?;
        if state.step.is_multiple_of(every) || state.step == a.steps {
            let mut row = MetricsRow::new(state.step);
            row.loss = Some(r.loss);
            row.grad_norm = Some(r.grad_norm);
            row.posterior_tv = posterior_tv(&pick(&state))?;
            row.wall_time_ms = elapsed(started);
            log.push(&row);
        }
    }
    let params = pick(&state);
    if a.steps == 0 {
        let mut row = MetricsRow::new(0);
        row.posterior_tv = posterior_tv(&params)?;
        row.wall_time_ms = elapsed(started);
        log.push(&row);
    }
    let ckpt = ModelCheckpoint {
        role: Role::Teacher,
        params,
        process,
        tokenizer: data.tokenizer,
        rng_state: RngState { seed: a.seed, step: state.step },
    };
    save_checkpoint(&a.out, &ckpt)?;
    write_metrics(a.output.metrics.as_deref(), &log)?;
    eprintln!("trained {} steps; teacher written to {}", state.step, a.out.display());
    Ok(())
}

fn distill(a: &DistillArgs) -> CliResult<()> {
    let teacher = load_checkpoint(&a.teacher)?;
    if teacher.role != Role::Teacher {
        return Err(CliError::Config(format!("{} is not a teacher checkpoint", a.teacher.display())));
    }
    let param = teacher.params.parameterization;
    let loss = match &a.loss {
        Some(s) => LossKind::parse(s)?,
        None => default_loss(param),
    };
    loss.check(param, teacher.process.kind())?;
    let config = DistillConfig {
        loss: loss_config(loss, &a.loss_opts)?,
        optimizer: OptimizerConfig {
            fake: adamw(a.fake_lr, a.warmup, a.weight_decay)?,
            student: adamw(a.student_lr, a.warmup, a.weight_decay)?,
            ema_decay: a.ema_decay,
        },
        batch: a.batch,
        seed: a.seed,
        fake_updates: a.fake_updates,
    };
    config.validate()?;
    let eval_sampler = sampler_config(sampler_kind(None, &teacher.process)?, a.eval_steps, a.seed)?;

    let data = load_data(&a.data)?;
    let process = teacher.process.clone();
    if data.data_tokens != process.data_tokens() || data.source.length() != teacher.params.config.length {
        return Err(CliError::Config(format!(
            "data has {} tokens at length {}; the teacher expects {} at length {}",
            data.data_tokens,
            data.source.length(),
            process.data_tokens(),
            teacher.params.config.length
        )));
    }
    if let (Some(a_tok), Some(b_tok)) = (&data.tokenizer, &teacher.tokenizer) {
        if a_tok != b_tok {
            return Err(CliError::Config("corpus vocabulary differs from the teacher's".into()));
        }
    }

    let mut state = match (a.resume, &a.state) {
        (true, Some(path)) => {
            let saved = load_distill_state(path)?;
            if saved.seed != a.seed || saved.state.teacher != teacher.params || saved.process != process {
                return Err(CliError::IncompatibleCheckpoint(format!(
                    "{} was written for a different teacher, process or seed",
                    path.display()
                )));
            }
            saved.state
        }
        _ => DistillState::new(teacher.params.clone()),
    };
    let metrics_path = a.output.metrics.as_deref();
    let mut log = match metrics_path {
        Some(p) if a.resume => MetricsLog::resume(p, state.step + 1)?,
        _ => MetricsLog::new(),
    };

    let tokenizer = teacher.tokenizer.clone();
    let save_state = |s: &DistillState, log: &MetricsLog| -> CliResult<()> {
        if let Some(path) = &a.state {
            let ckpt = DistillCheckpoint { state: s.clone(), process: process.clone(), tokenizer: tokenizer.clone(), seed: a.seed };
            save_distill_state(path, &ckpt)?;
            write_metrics(metrics_path, log)?;
        }
        Ok(())
    };
    let exact_student_kl = |s: &DistillState| -> CliResult<Option<f64>> {
        match &data.toy {
            Some(toy) => {
                let student = ModelCheckpoint {
                    role: Role::Student,
                    params: s.student.clone(),
                    process: process.clone(),
                    tokenizer: None,
                    rng_state: RngState { seed: a.seed, step: s.step },
                };
                Ok(Some(kl_or_infinite(&exact_law(&student, &eval_sampler)?, toy)?))
            }
            None => Ok(None),
        }
    };

    let started = clock(a.output.wall_time);
    let every = a.log_every.max(1);
    let mut failure: Option<CliError> = None;
    let outcome = run_distillation(&mut state, &process, &config, &data.source, a.steps, |s, r| {
        let step = s.step;
        let step_result = (|| -> CliResult<()> {
            // Tied to step multiples so a resumed run logs the same rows.
            let eval_now = match a.eval_every {
                0 => step == a.steps,
                k => step.is_multiple_of(k),
            };
            if step.is_multiple_of(every) || eval_now {
                let mut row = MetricsRow::new(step);
                row.loss_fake = Some(r.fake.loss);
                row.loss_student = Some(r.student.loss);
                row.grad_norm_fake = Some(r.fake.grad_norm);
                row.grad_norm_student = Some(r.student.grad_norm);
                if eval_now {
                    row.exact_kl = exact_student_kl(s)?;
                }
                row.wall_time_ms = elapsed(started);
                log.push(&row);
            }
            if a.checkpoint_every > 0 && step.is_multiple_of(a.checkpoint_every) {
                save_state(s, &log)?;
            }
            Ok(())
        })();
        step_result.map_err(|e| {
            failure = Some(e);
            dlm_core::Error::Config("stopped".into())
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    outcome?;

    save_state(&state, &log)?;
    let student = ModelCheckpoint {
        role: Role::Student,
        params: if a.save_ema { state.student_ema.clone() } else { state.student.clone() },
        process: process.clone(),
        tokenizer: teacher.tokenizer.clone(),
        rng_state: RngState { seed: a.seed, step: state.step },
    };
    save_checkpoint(&a.out, &student)?;
    write_metrics(metrics_path, &log)?;
    eprintln!("distilled to step {}; student written to {}", state.step, a.out.display());
    Ok(())
}

fn sample(a: &SampleArgs) -> CliResult<()> {
    let mut rng = step_rng(a.seed, 0, Phase::Sample);
    let (gen, tokenizer) = match (&a.checkpoint, &a.oracle_toy) {
        (Some(path), None) => {
            let ckpt = load_checkpoint(path)?;
            let cfg = sampler_config(sampler_kind(a.sampler.as_deref(), &ckpt.process)?, a.steps, a.seed)?;
            (generate_from(&ckpt, &cfg, a.count, &mut rng)?, ckpt.tokenizer)
        }
        (None, Some(path)) => {
            let kind = parse_process_kind(&a.process.process)?;
            let schedule = parse_schedule(&a.process.schedule, a.process.schedule_eps)?;
            let toy = load_toy_spec(path)?;
            let process = DiffusionProcess::for_data(kind, toy.n_tokens(), schedule)?;
            let cfg = sampler_config(sampler_kind(a.sampler.as_deref(), &process)?, a.steps, a.seed)?;
            let oracle = exact_denoiser(&toy, &process)?;
            let model: &dyn Denoiser = &oracle;
            let gen = match cfg.kind.needs() {
                OutputKind::Clean => generate(model, &process, &cfg, a.count, toy.length(), &mut rng)?,
                OutputKind::Score => {
                    generate(&PlugInScore { inner: model, process: &process }, &process, &cfg, a.count, toy.length(), &mut rng)?
                }
            };
            (gen, None)
        }
        _ => return Err(CliError::Config("give exactly one of --checkpoint or --oracle-toy".into())),
    };
    let started = clock(a.output.wall_time);
    let mut text = String::new();
    for seq in gen.sequences().take(a.count) {
        let ids: Vec<String> = seq.iter().map(usize::to_string).collect();
        text.push_str(&ids.join(" "));
        text.push('\n');
        if let Some(t) = &tokenizer {
            text.push_str("# ");
            text.push_str(&t.decode(seq));
            text.push('\n');
        }
    }
    write_atomic(&a.out, text.as_bytes())?;
    if let Some(path) = &a.output.metrics {
        let mut row = MetricsRow::new(0);
        row.entropy = Some(mean_entropy(gen.sequences().take(a.count)));
        if a.count > 0 && gen.euler_moves > 0 {
            row.clip_rate = Some(gen.clip_rate());
        }
        row.wall_time_ms = elapsed(started);
        let mut log = MetricsLog::new();
        log.push(&row);
        log.write(path)?;
    }
    Ok(())
}

/// Token-id lines of a samples file; `#` lines are ignored.
pub fn read_samples(path: &Path) -> CliResult<Vec<Vec<usize>>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let seq: Result<Vec<usize>, _> = line.split_whitespace().map(str::parse).collect();
        out.push(seq.map_err(|_| CliError::Data(format!("{} line {}: not a list of token ids", path.display(), i + 1)))?);
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{} holds no sequences", path.display())));
    }
    Ok(out)
}

/// Monte Carlo diffusion bound per token under the reference model.
fn sample_nll(ckpt: &ModelCheckpoint, samples: &[Vec<usize>], draws: usize, seed: u64) -> CliResult<f64> {
    let params = &ckpt.params;
    let length = params.config.length;
    let n = ckpt.process.data_tokens();
    if let Some(bad) = samples.iter().find(|s| s.len() != length || s.iter().any(|&x| x >= n)) {
        return Err(CliError::Data(format!("sample {bad:?} does not fit the reference model (length {length}, {n} tokens)")));
    }
    let kind = match params.parameterization {
        Parameterization::X0Duo => LossKind::Udlm,
        p => default_loss(p),
    };
    let cfg = LossConfig { kind, tau: 0.05, include_constant: true, n_time_samples: draws.max(1) };
    let objective = Objective::new(cfg, ckpt.process.clone())?;
    let mut rng = step_rng(seed, 0, Phase::Sample);
    let mut total = 0.0;
    for chunk in samples.chunks(NLL_CHUNK) {
        let tokens: Vec<usize> = chunk.iter().flatten().copied().collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false)?;
        let loss = objective.data_loss(&mut tape, ModelRef { params, bound: &bound }, &tokens, length, &mut rng)?;
        total += tape.scalar(loss) * chunk.len() as f64;
    }
    Ok(total / (samples.len() * length) as f64)
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let started = clock(a.output.wall_time);
    let samples = read_samples(&a.samples)?;
    let mut row = MetricsRow::new(0);
    row.entropy = Some(mean_entropy(samples.iter().map(Vec::as_slice)));
    if let Some(path) = &a.checkpoint {
        let ckpt = load_checkpoint(path)?;
        row.nll = Some(sample_nll(&ckpt, &samples, a.nll_draws, a.seed)?);
        if let Some(toy_path) = &a.toy {
            let toy = load_toy_spec(toy_path)?;
            if toy.n_tokens() != ckpt.process.data_tokens() || toy.length() != ckpt.params.config.length {
                return Err(CliError::Config("toy spec does not match the checkpoint's vocabulary or length".into()));
            }
            let cfg = sampler_config(sampler_kind(a.sampler.as_deref(), &ckpt.process)?, a.steps, a.seed)?;
            row.exact_kl = Some(kl_or_infinite(&exact_law(&ckpt, &cfg)?, &toy)?);
        }
    }
    if let Some(endpoint) = endpoint_from_env() {
        match remote_score(&endpoint, &samples) {
            Ok(nll) => row.gen_ppl = Some(generative_perplexity(&nll, &samples)),
            Err(RemoteError::Unavailable(e)) => eprintln!("warning: remote scoring skipped: {e}"),
            Err(e @ RemoteError::Protocol(_)) => return Err(CliError::Data(e.to_string())),
        }
    }
    row.wall_time_ms = elapsed(started);
    let show = |name: &str, v: Option<f64>| match v {
        Some(x) => println!("{name}={}", format_float(x)),
        None => println!("{name}=absent"),
    };
    show("entropy", row.entropy);
    show("nll", row.nll);
    show("exact_kl", row.exact_kl);
    show("gen_ppl", row.gen_ppl);
    if let Some(path) = &a.output.metrics {
        let mut log = MetricsLog::new();
        log.push(&row);
        log.write(path)?;
    }
    Ok(())
}

const BOUND_SLACK: f64 = 1e-9;
const OPTIMUM_TOLERANCE: f64 = 1e-8;

fn oracle_check(a: &OracleArgs) -> CliResult<()> {
    let loss = LossKind::parse(&a.loss)?;
    let kind = parse_process_kind(&a.process)?;
    loss.check(loss.parameterization(), kind)?;
    let schedule = parse_schedule("log-linear", a.schedule_eps)?;
    let mut rng = init_rng(a.seed);
    let p_star = match &a.toy {
        Some(path) => load_toy_spec(path)?,
        None => ToyDistribution::dirichlet(a.n_tokens, a.length, &mut rng)?,
    };
    let process = DiffusionProcess::for_data(kind, p_star.n_tokens(), schedule)?;
    let teacher = exact_optimal_fake(&p_star, &process, loss)?;

    let mut report = String::from("instance,inverse_loss,exact_kl,bound_holds\n");
    let mut violations = 0;
    for i in 0..=a.instances {
        let p_theta = if i == 0 { p_star.clone() } else { ToyDistribution::dirichlet(p_star.n_tokens(), p_star.length(), &mut rng)? };
        let value = exact_inverse_loss(&p_theta, &teacher, &process, loss, a.quad_order)?;
        let kl = kl_or_infinite(&p_theta, &p_star)?;
        let holds = value >= kl - BOUND_SLACK && (i > 0 || value.abs() <= OPTIMUM_TOLERANCE);
        violations += usize::from(!holds);
        report.push_str(&format!("{i},{},{},{holds}\n", format_float(value), format_float(kl)));
    }
    write_atomic(&a.out, report.as_bytes())?;
    if violations > 0 {
        return Err(CliError::Numeric(format!("{violations} instances violate the bound; see {}", a.out.display())));
    }
    println!("bound holds on {} instances", a.instances + 1);
    Ok(())
}
