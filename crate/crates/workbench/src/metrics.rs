//! Metrics rows, CSV output and sample statistics.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};
use crate::files::{read_to_string, write_atomic};

pub const HEADER: &str = "step,loss,loss_fake,loss_student,grad_norm,grad_norm_fake,grad_norm_student,\
entropy,nll,gen_ppl,exact_kl,posterior_tv,clip_rate,wall_time_ms";

/// One logged step; absent values are written as empty cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: Option<f64>,
    pub loss_fake: Option<f64>,
    pub loss_student: Option<f64>,
    pub grad_norm: Option<f64>,
    pub grad_norm_fake: Option<f64>,
    pub grad_norm_student: Option<f64>,
    pub entropy: Option<f64>,
    pub nll: Option<f64>,
    pub gen_ppl: Option<f64>,
    pub exact_kl: Option<f64>,
    pub posterior_tv: Option<f64>,
    pub clip_rate: Option<f64>,
    pub wall_time_ms: Option<u128>,
}

/// 17 significant digits, enough to recover the exact 64-bit value.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

impl MetricsRow {
    pub fn new(step: u64) -> Self {
        Self { step, ..Self::default() }
    }

    pub fn to_csv(&self) -> String {
        let floats = [
            self.loss,
            self.loss_fake,
            self.loss_student,
            self.grad_norm,
            self.grad_norm_fake,
            self.grad_norm_student,
            self.entropy,
            self.nll,
            self.gen_ppl,
            self.exact_kl,
            self.posterior_tv,
            self.clip_rate,
        ];
        let mut s = self.step.to_string();
        for f in floats {
            s.push(',');
            s.push_str(&cell(f));
        }
        s.push(',');
        if let Some(ms) = self.wall_time_ms {
            s.push_str(&ms.to_string());
        }
        s
    }
}

/// Metrics file contents, kept in memory and rewritten atomically.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    lines: Vec<String>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Existing rows of `path` for steps before `step`; a missing file gives an empty log.
    pub fn resume(path: &Path, step: u64) -> CliResult<Self> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let text = read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(CliError::Data(format!("{} does not start with the metrics header", path.display())));
        }
        let mut kept = Vec::new();
        for line in lines {
            let s: u64 = line
                .split(',')
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| CliError::Data(format!("bad metrics row '{line}'")))?;
            if s < step {
                kept.push(line.to_string());
            }
        }
        Ok(Self { lines: kept })
    }

    pub fn push(&mut self, row: &MetricsRow) {
        self.lines.push(row.to_csv());
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::with_capacity(64 * (self.lines.len() + 1));
        s.push_str(HEADER);
        s.push('\n');
        for l in &self.lines {
            let _ = writeln!(s, "{l}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, self.render().as_bytes())
    }
}

/// Empirical token-frequency entropy of one sequence, in nats.
pub fn sequence_entropy(seq: &[usize]) -> f64 {
    if seq.is_empty() {
        return 0.0;
    }
    let mut sorted = seq.to_vec();
    sorted.sort_unstable();
    let n = seq.len() as f64;
    let mut h = 0.0;
    for run in sorted.chunk_by(|a, b| a == b) {
        let p = run.len() as f64 / n;
        h -= p * p.ln();
    }
    h
}

/// Mean of [`sequence_entropy`] over sequences.
pub fn mean_entropy<'a>(seqs: impl IntoIterator<Item = &'a [usize]>) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for s in seqs {
        total += sequence_entropy(s);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
