//! Corpus ingestion and toy-distribution specs.

use std::collections::BTreeSet;
use std::path::Path;

use dlm_core::oracle::ToyDistribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::files::read_to_string;

const SPEC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerMode {
    Byte,
    Char,
}

impl TokenizerMode {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "byte" => Ok(TokenizerMode::Byte),
            "char" => Ok(TokenizerMode::Char),
            other => Err(CliError::Config(format!("unknown tokenizer mode '{other}'"))),
        }
    }
}

/// Symbol table of an ingested corpus. Data token ids are the symbols in
/// order followed by the separator; a mask, when present, comes after.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub mode: String,
    /// Observed characters, sorted; empty in byte mode.
    #[serde(default)]
    pub symbols: Vec<char>,
}

impl Tokenizer {
    pub fn byte() -> Self {
        Self { mode: "byte".into(), symbols: vec![] }
    }

    fn is_byte(&self) -> bool {
        self.mode == "byte"
    }

    pub fn separator(&self) -> usize {
        if self.is_byte() {
            256
        } else {
            self.symbols.len()
        }
    }

    /// Symbols plus the separator.
    pub fn data_tokens(&self) -> usize {
        self.separator() + 1
    }

    /// Printable text for token ids; control characters are escaped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let sep = self.separator();
        let mut out = String::new();
        let mut bytes = Vec::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        };
        for &id in ids {
            if id == sep {
                flush(&mut bytes, &mut out);
                out.push_str("<sep>");
            } else if id > sep {
                flush(&mut bytes, &mut out);
                out.push_str("<mask>");
            } else if self.is_byte() {
                bytes.push(id as u8);
            } else {
                out.push(self.symbols[id]);
            }
        }
        flush(&mut bytes, &mut out);
        out.replace('\r', "\\r").replace('\t', "\\t").replace('\n', "\\n")
    }
}

/// Fixed-length windows of a tokenized corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tokenizer: Tokenizer,
    pub length: usize,
    /// Concatenated windows, `length` tokens each.
    pub tokens: Vec<usize>,
}

impl Corpus {
    pub fn windows(&self) -> usize {
        self.tokens.len() / self.length
    }

    /// Hex SHA-256 of the tokenizer, window length and tokens.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.tokenizer.mode.as_bytes());
        for c in &self.tokenizer.symbols {
            h.update((*c as u32).to_le_bytes());
        }
        h.update((self.length as u64).to_le_bytes());
        for &t in &self.tokens {
            h.update((t as u32).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Tokenizes the non-empty lines of a file, joins them with the separator
/// and cuts the stream into windows of `length`, dropping a partial tail.
pub fn ingest_corpus(path: &Path, mode: TokenizerMode, length: usize) -> CliResult<Corpus> {
    if length == 0 {
        return Err(CliError::Config("window length must be at least 1".into()));
    }
    let raw = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let (tokenizer, docs): (Tokenizer, Vec<Vec<usize>>) = match mode {
        TokenizerMode::Byte => {
            let docs = raw
                .split(|&b| b == b'\n')
                .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
                .filter(|l| !l.is_empty())
                .map(|l| l.iter().map(|&b| b as usize).collect())
                .collect();
            (Tokenizer::byte(), docs)
        }
        TokenizerMode::Char => {
            let text = String::from_utf8(raw).map_err(|_| CliError::Data(format!("{} is not UTF-8", path.display())))?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
            let symbols: Vec<char> = lines.iter().flat_map(|l| l.chars()).collect::<BTreeSet<_>>().into_iter().collect();
            let docs = lines
                .iter()
                .map(|l| l.chars().map(|c| symbols.binary_search(&c).expect("symbol collected")).collect())
                .collect();
            (Tokenizer { mode: "char".into(), symbols }, docs)
        }
    };
    if docs.is_empty() {
        return Err(CliError::Data(format!("{} has no text", path.display())));
    }
    let sep = tokenizer.separator();
    let mut stream = Vec::new();
    for (i, d) in docs.into_iter().enumerate() {
        if i > 0 {
            stream.push(sep);
        }
        stream.extend(d);
    }
    let usable = stream.len() / length * length;
    if usable == 0 {
        return Err(CliError::Data(format!("{} tokens do not fill one window of {length}", stream.len())));
    }
    stream.truncate(usable);
    Ok(Corpus { tokenizer, length, tokens: stream })
}

#[derive(Debug, Deserialize, Serialize)]
struct ToySpec {
    n_tokens: usize,
    length: usize,
    probs: Vec<f64>,
}

/// Reads `{"n_tokens", "length", "probs"}` with probabilities in enumeration order.
pub fn load_toy_spec(path: &Path) -> CliResult<ToyDistribution> {
    let text = read_to_string(path)?;
    let spec: ToySpec = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("toy spec {}: {e}", path.display())))?;
    parse_toy_spec(spec)
}

pub fn toy_spec_json(p: &ToyDistribution) -> String {
    let spec = ToySpec { n_tokens: p.n_tokens(), length: p.length(), probs: p.probs().to_vec() };
    serde_json::to_string(&spec).expect("toy spec serializes")
}

fn parse_toy_spec(spec: ToySpec) -> CliResult<ToyDistribution> {
    let want = (spec.n_tokens as u128).checked_pow(spec.length as u32);
    if want != Some(spec.probs.len() as u128) {
        return Err(CliError::Data(format!(
            "{} probabilities for {} tokens at length {}",
            spec.probs.len(),
            spec.n_tokens,
            spec.length
        )));
    }
    if spec.probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(CliError::Data("probabilities must be finite and non-negative".into()));
    }
    let sum: f64 = spec.probs.iter().sum();
    if (sum - 1.0).abs() > SPEC_TOLERANCE {
        return Err(CliError::Data(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(ToyDistribution::from_weights(spec.n_tokens, spec.length, spec.probs)?)
}
