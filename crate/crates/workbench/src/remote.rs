//! Optional scoring of samples by an external language model over HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENDPOINT_VAR: &str = "DLM_SCORE_ENDPOINT";
const ATTEMPTS: u32 = 3;
const BACKOFF_MS: u64 = 200;
const TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, PartialEq)]
pub enum RemoteError {
    /// Connection or timeout failures after every retry; callers drop the metric.
    #[error("remote scorer unavailable: {0}")]
    Unavailable(String),
    #[error("remote scorer protocol error: {0}")]
    Protocol(String),
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    sequences: &'a [Vec<usize>],
}

#[derive(Deserialize)]
struct ScoreResponse {
    nll: Vec<f64>,
}

/// Endpoint from the environment, if set and non-empty.
pub fn endpoint_from_env() -> Option<String> {
    std::env::var(ENDPOINT_VAR).ok().filter(|s| !s.trim().is_empty())
}

/// Per-sequence negative log-likelihoods (nats, summed over tokens) from `POST {endpoint}/score`.
pub fn remote_score(endpoint: &str, sequences: &[Vec<usize>]) -> Result<Vec<f64>, RemoteError> {
    let url = format!("{}/score", endpoint.trim_end_matches('/'));
    let agent = ureq::AgentBuilder::new().timeout(TIMEOUT).build();
    let mut last = String::new();
    for attempt in 0..ATTEMPTS {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(BACKOFF_MS << (attempt - 1)));
        }
        match agent.post(&url).send_json(ScoreRequest { sequences }) {
            Ok(resp) => {
                let body: ScoreResponse = resp.into_json().map_err(|e| RemoteError::Protocol(e.to_string()))?;
                if body.nll.len() != sequences.len() {
                    return Err(RemoteError::Protocol(format!("{} scores for {} sequences", body.nll.len(), sequences.len())));
                }
                if body.nll.iter().any(|v| !v.is_finite()) {
                    return Err(RemoteError::Protocol("non-finite score".into()));
                }
                return Ok(body.nll);
            }
            Err(ureq::Error::Status(code, _)) if code < 500 => {
                return Err(RemoteError::Protocol(format!("HTTP status {code}")));
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(RemoteError::Unavailable(last))
}

/// `exp` of the mean per-token NLL.
pub fn generative_perplexity(nll: &[f64], sequences: &[Vec<usize>]) -> f64 {
    let tokens: usize = sequences.iter().map(Vec::len).sum();
    if tokens == 0 {
        return f64::NAN;
    }
    (nll.iter().sum::<f64>() / tokens as f64).exp()
}
