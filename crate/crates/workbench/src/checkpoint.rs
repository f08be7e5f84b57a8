//! JSON checkpoints with base64 little-endian weight payloads.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use dlm_core::distill::DistillState;
use dlm_core::model::{DenoiserParams, ModelConfig, ParamTensor, Parameterization};
use dlm_core::optim::Moments;
use dlm_core::process::{DiffusionProcess, NoiseSchedule, ProcessKind, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::data::Tokenizer;
use crate::error::{CliError, CliResult};
use crate::files::{read_to_string, write_atomic};

pub const FORMAT_VERSION: u32 = 1;

/// What a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// A denoiser trained on data.
    Teacher,
    /// A distilled generator.
    Student,
    /// Everything needed to resume distillation.
    DistillState,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::DistillState => "distill-state",
        }
    }

    fn parse(s: &str) -> CliResult<Self> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            "distill-state" => Ok(Role::DistillState),
            other => Err(CliError::IncompatibleCheckpoint(format!("unknown role '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Completed steps; every step derives its generator from `(seed, step)`.
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelConfigJson {
    d: usize,
    blocks: usize,
    heads: usize,
    dropout: f64,
    vocab: usize,
    length: usize,
    mask: Option<usize>,
    time_conditioning: bool,
    temperature: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProcessJson {
    kind: String,
    schedule: String,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayJson {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    role: String,
    model_config: ModelConfigJson,
    parameterization: String,
    process: ProcessJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokenizer: Option<Tokenizer>,
    rng_state: RngState,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    counters: BTreeMap<String, u64>,
    arrays: Vec<ArrayJson>,
}

/// A single model with the process and vocabulary it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub role: Role,
    pub params: DenoiserParams,
    pub process: DiffusionProcess,
    pub tokenizer: Option<Tokenizer>,
    pub rng_state: RngState,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> CliResult<Vec<f64>> {
    let bytes = STANDARD.decode(text).map_err(|e| CliError::Data(format!("corrupt array payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(CliError::Data(format!("array payload of {} bytes is not a whole number of floats", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

fn config_json(c: &ModelConfig) -> ModelConfigJson {
    ModelConfigJson {
        d: c.d,
        blocks: c.blocks,
        heads: c.heads,
        dropout: c.dropout,
        vocab: c.vocab,
        length: c.length,
        mask: c.mask,
        time_conditioning: c.time_conditioning,
        temperature: c.temperature,
    }
}

fn config_from(j: &ModelConfigJson) -> ModelConfig {
    ModelConfig {
        d: j.d,
        blocks: j.blocks,
        heads: j.heads,
        dropout: j.dropout,
        vocab: j.vocab,
        length: j.length,
        mask: j.mask,
        time_conditioning: j.time_conditioning,
        temperature: j.temperature,
    }
}

fn process_json(p: &DiffusionProcess) -> ProcessJson {
    let s = p.schedule();
    ProcessJson {
        kind: match p.kind() {
            ProcessKind::Absorbing => "absorbing",
            ProcessKind::Uniform => "uniform",
        }
        .into(),
        schedule: match s.kind {
            ScheduleKind::LogLinear => "log-linear",
            ScheduleKind::LinearAlpha => "linear-alpha",
        }
        .into(),
        eps: s.eps,
    }
}

pub fn parse_process_kind(s: &str) -> CliResult<ProcessKind> {
    match s {
        "absorbing" => Ok(ProcessKind::Absorbing),
        "uniform" => Ok(ProcessKind::Uniform),
        other => Err(CliError::Config(format!("unknown process '{other}'"))),
    }
}

pub fn parse_schedule(kind: &str, eps: f64) -> CliResult<NoiseSchedule> {
    let schedule = match kind {
        "log-linear" => NoiseSchedule::log_linear(eps),
        "linear-alpha" => NoiseSchedule::linear_alpha(eps),
        other => return Err(CliError::Config(format!("unknown schedule '{other}'"))),
    };
    schedule.validate()?;
    Ok(schedule)
}

fn process_from(j: &ProcessJson, config: &ModelConfig) -> CliResult<DiffusionProcess> {
    let kind = parse_process_kind(&j.kind).map_err(|e| CliError::IncompatibleCheckpoint(e.to_string()))?;
    let schedule = parse_schedule(&j.schedule, j.eps).map_err(|e| CliError::IncompatibleCheckpoint(e.to_string()))?;
    let process = match kind {
        ProcessKind::Absorbing => DiffusionProcess::absorbing(config.vocab, schedule)?,
        ProcessKind::Uniform => DiffusionProcess::uniform(config.vocab, schedule)?,
    };
    if process.mask() != config.mask {
        return Err(CliError::IncompatibleCheckpoint("model mask does not match the process".into()));
    }
    Ok(process)
}

fn arrays_of(prefix: &str, params: &[ParamTensor], out: &mut Vec<ArrayJson>) {
    for t in params {
        out.push(ArrayJson { name: format!("{prefix}{}", t.name), shape: t.shape.clone(), data: encode_f64s(&t.data) });
    }
}

fn moment_tensors(template: &DenoiserParams, values: &[Vec<f64>]) -> Vec<ParamTensor> {
    template
        .tensors
        .iter()
        .zip(values)
        .map(|(t, v)| ParamTensor { name: t.name.clone(), shape: t.shape.clone(), data: v.clone() })
        .collect()
}

impl Envelope {
    fn new(role: Role, params: &DenoiserParams, process: &DiffusionProcess, tokenizer: Option<&Tokenizer>, rng: RngState) -> Self {
        Envelope {
            format_version: FORMAT_VERSION,
            role: role.name().into(),
            model_config: config_json(&params.config),
            parameterization: params.parameterization.name().into(),
            process: process_json(process),
            tokenizer: tokenizer.cloned(),
            rng_state: rng,
            counters: BTreeMap::new(),
            arrays: vec![],
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s.into_bytes()
    }

    fn read(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
        }
        let text = read_to_string(path)?;
        let env: Envelope =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))?;
        if env.format_version != FORMAT_VERSION {
            return Err(CliError::IncompatibleCheckpoint(format!(
                "format version {} (expected {FORMAT_VERSION})",
                env.format_version
            )));
        }
        Ok(env)
    }

    fn model_parts(&self) -> CliResult<(ModelConfig, Parameterization, DiffusionProcess)> {
        let config = config_from(&self.model_config);
        let param = Parameterization::parse(&self.parameterization).map_err(|e| CliError::IncompatibleCheckpoint(e.to_string()))?;
        config.validate(param).map_err(|e| CliError::IncompatibleCheckpoint(e.to_string()))?;
        let process = process_from(&self.process, &config)?;
        Ok((config, param, process))
    }

    /// Weights stored under `prefix`, checked against the architecture.
    fn group(&self, prefix: &str, config: &ModelConfig, param: Parameterization) -> CliResult<DenoiserParams> {
        let layout = dlm_core::model::param_layout(config);
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let full = format!("{prefix}{name}");
            let a = self
                .arrays
                .iter()
                .find(|a| a.name == full)
                .ok_or_else(|| CliError::IncompatibleCheckpoint(format!("missing array '{full}'")))?;
            if a.shape != shape {
                return Err(CliError::IncompatibleCheckpoint(format!("array '{full}' has shape {:?}, expected {shape:?}", a.shape)));
            }
            let data = decode_f64s(&a.data)?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(CliError::Data(format!("array '{full}' holds {} values", data.len())));
            }
            tensors.push(ParamTensor { name, shape, data });
        }
        Ok(DenoiserParams { config: config.clone(), parameterization: param, tensors })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> CliResult<()> {
    write_atomic(path, &checkpoint_bytes(ckpt))
}

pub fn checkpoint_bytes(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let mut env = Envelope::new(ckpt.role, &ckpt.params, &ckpt.process, ckpt.tokenizer.as_ref(), ckpt.rng_state);
    arrays_of("", &ckpt.params.tensors, &mut env.arrays);
    env.to_bytes()
}

/// Loads a teacher or student checkpoint.
pub fn load_checkpoint(path: &Path) -> CliResult<ModelCheckpoint> {
    let env = Envelope::read(path)?;
    let role = Role::parse(&env.role)?;
    if role == Role::DistillState {
        return Err(CliError::IncompatibleCheckpoint(format!("{} is a distillation state, not a model", path.display())));
    }
    let (config, param, process) = env.model_parts()?;
    let params = env.group("", &config, param)?;
    Ok(ModelCheckpoint { role, params, process, tokenizer: env.tokenizer, rng_state: env.rng_state })
}

/// Full distillation state for exact resumption.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillCheckpoint {
    pub state: DistillState,
    pub process: DiffusionProcess,
    pub tokenizer: Option<Tokenizer>,
    pub seed: u64,
}

const GROUPS: [&str; 4] = ["teacher.", "fake.", "student.", "student_ema."];

pub fn save_distill_state(path: &Path, ckpt: &DistillCheckpoint) -> CliResult<()> {
    let s = &ckpt.state;
    let rng = RngState { seed: ckpt.seed, step: s.step };
    let mut env = Envelope::new(Role::DistillState, &s.teacher, &ckpt.process, ckpt.tokenizer.as_ref(), rng);
    for (prefix, p) in GROUPS.iter().zip([&s.teacher, &s.fake, &s.student, &s.student_ema]) {
        arrays_of(prefix, &p.tensors, &mut env.arrays);
    }
    for (name, m) in [("fake", &s.fake_moments), ("student", &s.student_moments)] {
        arrays_of(&format!("{name}_m."), &moment_tensors(&s.teacher, &m.m), &mut env.arrays);
        arrays_of(&format!("{name}_v."), &moment_tensors(&s.teacher, &m.v), &mut env.arrays);
        env.counters.insert(format!("{name}_moment_steps"), m.step);
    }
    write_atomic(path, &env.to_bytes())
}

pub fn load_distill_state(path: &Path) -> CliResult<DistillCheckpoint> {
    let env = Envelope::read(path)?;
    if Role::parse(&env.role)? != Role::DistillState {
        return Err(CliError::IncompatibleCheckpoint(format!("{} is not a distillation state", path.display())));
    }
    let (config, param, process) = env.model_parts()?;
    let [teacher, fake, student, student_ema] = GROUPS.map(|g| env.group(g, &config, param));
    let moments = |name: &str| -> CliResult<Moments> {
        let m = env.group(&format!("{name}_m."), &config, param)?;
        let v = env.group(&format!("{name}_v."), &config, param)?;
        let step = *env
            .counters
            .get(&format!("{name}_moment_steps"))
            .ok_or_else(|| CliError::IncompatibleCheckpoint(format!("missing {name} moment counter")))?;
        Ok(Moments { step, m: m.tensors.into_iter().map(|t| t.data).collect(), v: v.tensors.into_iter().map(|t| t.data).collect() })
    };
    let state = DistillState {
        teacher: teacher?,
        fake: fake?,
        student: student?,
        fake_moments: moments("fake")?,
        student_moments: moments("student")?,
        student_ema: student_ema?,
        step: env.rng_state.step,
    };
    Ok(DistillCheckpoint { state, process, tokenizer: env.tokenizer, seed: env.rng_state.seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_payload_round_trips_bits() {
        let v = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e308, f64::from_bits(1)];
        let back = decode_f64s(&encode_f64s(&v)).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(decode_f64s("not base64!"), Err(CliError::Data(_))));
        assert!(matches!(decode_f64s(&STANDARD.encode([1u8, 2, 3])), Err(CliError::Data(_))));
    }
}
