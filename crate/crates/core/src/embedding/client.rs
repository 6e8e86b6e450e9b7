use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::EmbeddingBlock;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbedRequest {
    pub image_id: String,
    pub facts: Vec<String>,
    /// Encoder checkpoint the service should use, if it hosts several.
    pub model_hint: Option<String>,
}

impl EmbedRequest {
    pub fn new(image_id: impl Into<String>, facts: Vec<String>) -> Self {
        EmbedRequest {
            image_id: image_id.into(),
            facts,
            model_hint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.facts.is_empty() {
            return Err(Error::InvalidRequest(format!("{}: no facts", self.image_id)));
        }
        if self.facts.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::InvalidRequest(format!("{}: blank fact", self.image_id)));
        }
        Ok(())
    }
}

/// Exponential backoff: attempt `i` (0-based retry) waits
/// `min(initial · multiplier^i, max)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            initial_backoff: Duration::from_millis(200),
            multiplier: 2.0,
            max_backoff: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        let scaled = self.initial_backoff.as_secs_f64() * self.multiplier.powi(retry as i32);
        Duration::from_secs_f64(scaled.min(self.max_backoff.as_secs_f64()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::InvalidRequest("max_in_flight must be at least 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(Error::InvalidRequest("timeout must be positive".into()));
        }
        Ok(())
    }

    fn embed_url(&self) -> String {
        format!("{}/embed", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Deserialize)]
struct EmbedResponse {
    image_id: String,
    n_tokens: usize,
    dim: usize,
    mask: Vec<Vec<u8>>,
    data_b64: String,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

/// Blocking client for the `/embed` service.
pub struct EmbeddingClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
}

impl EmbeddingClient {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Transport {
                url: config.base_url.clone(),
                message: e.to_string(),
            })?;
        Ok(EmbeddingClient { config, http })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Fetches one block, retrying transient failures (transport errors,
    /// timeouts, 429 and 5xx) according to the retry policy.
    pub fn fetch(&self, request: &EmbedRequest) -> Result<EmbeddingBlock<f64>> {
        request.validate()?;
        let mut retry = 0;
        loop {
            match self.attempt(request) {
                Ok(block) => return Ok(block),
                Err(e) if is_transient(&e) && retry < self.config.retry.max_retries => {
                    let wait = self.config.retry.backoff(retry);
                    warn!("{}: {e}; retrying in {wait:?}", request.image_id);
                    thread::sleep(wait);
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn attempt(&self, request: &EmbedRequest) -> Result<EmbeddingBlock<f64>> {
        let url = self.config.embed_url();
        debug!("POST {url} ({})", request.image_id);
        let resp = self.http.post(&url).json(request).send().map_err(|e| {
            if e.is_timeout() {
                Error::Timeout { url: url.clone() }
            } else {
                Error::Transport {
                    url: url.clone(),
                    message: e.to_string(),
                }
            }
        })?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| {
            if e.is_timeout() {
                Error::Timeout { url: url.clone() }
            } else {
                Error::Transport {
                    url: url.clone(),
                    message: e.to_string(),
                }
            }
        })?;
        if !status.is_success() {
            let message = serde_json::from_slice::<ErrorBody>(&body)
                .map(|b| b.error)
                .unwrap_or_else(|_| String::from_utf8_lossy(&body).into_owned());
            return Err(Error::Http {
                status: status.as_u16(),
                message,
            });
        }
        decode_response(request, &body)
    }

    /// Fetches all requests with at most `max_in_flight` outstanding; results
    /// are returned in input order.
    pub fn fetch_all(&self, requests: &[EmbedRequest]) -> Vec<Result<EmbeddingBlock<f64>>> {
        let slots: Vec<Mutex<Option<Result<EmbeddingBlock<f64>>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.min(requests.len());
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= requests.len() {
                        break;
                    }
                    let r = self.fetch(&requests[i]);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }
}

fn is_transient(e: &Error) -> bool {
    match e {
        Error::Timeout { .. } | Error::Transport { .. } => true,
        Error::Http { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

fn decode_response(request: &EmbedRequest, body: &[u8]) -> Result<EmbeddingBlock<f64>> {
    let r: EmbedResponse =
        serde_json::from_slice(body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
    if r.image_id != request.image_id {
        return Err(Error::MalformedResponse(format!(
            "response for {:?} answered request {:?}",
            r.image_id, request.image_id
        )));
    }
    let n = request.facts.len();
    if r.mask.len() != n {
        return Err(Error::MalformedResponse(format!(
            "mask has {} rows for {n} facts",
            r.mask.len()
        )));
    }
    if let Some(row) = r.mask.iter().find(|row| row.len() != r.n_tokens) {
        return Err(Error::MalformedResponse(format!(
            "mask row of length {} with n_tokens = {}",
            row.len(),
            r.n_tokens
        )));
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(r.data_b64.as_bytes())
        .map_err(|e| Error::MalformedResponse(format!("data_b64: {e}")))?;
    let expected = n * r.n_tokens * r.dim * 4;
    if bytes.len() != expected {
        return Err(Error::MalformedResponse(format!(
            "data has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mask = r.mask.concat();
    EmbeddingBlock::new(r.image_id, n, r.n_tokens, r.dim, mask, data)
        .map_err(|e| Error::InvalidPayload(Box::new(e)))
}

/// One-shot [`EmbeddingClient::fetch`].
pub fn fetch_embeddings(request: &EmbedRequest, config: &EndpointConfig) -> Result<EmbeddingBlock<f64>> {
    EmbeddingClient::new(config.clone())?.fetch(request)
}
