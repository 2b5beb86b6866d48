//! Blocking JSON-over-HTTP client shared by the remote embedder and chat model.
//!
//! Transient failures (connection errors, timeouts, 429 and 5xx responses) are
//! retried with exponential backoff. Authentication failures and other client
//! errors are returned immediately.

use std::time::Duration;

use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, warn};

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("network failure after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("server still failing after {attempts} attempt(s): HTTP {status}")]
    RetriesExhausted { attempts: u32, status: u16 },
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("request rejected with HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("client configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL without the `/v1/...` suffix, e.g. `https://api.openai.com`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    /// Maximum number of requests in flight at once.
    pub parallelism: usize,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: "RATREE_API_KEY".to_string(),
            timeout_secs: 60.0,
            max_retries: 5,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
            parallelism: 4,
        }
    }
}

pub(crate) struct JsonClient {
    http: reqwest::blocking::Client,
    cfg: EndpointConfig,
    api_key: Option<String>,
}

impl JsonClient {
    pub(crate) fn new(cfg: EndpointConfig) -> Result<Self, RemoteError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| RemoteError::Config(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { http, cfg, api_key })
    }

    pub(crate) fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn backoff(&self, attempt: u32, retry_after: Option<Duration>) -> Duration {
        let exp = self.cfg.backoff_base_ms.saturating_mul(1u64 << attempt.min(20));
        let d = Duration::from_millis(exp.min(self.cfg.backoff_max_ms));
        match retry_after {
            Some(ra) => ra.min(Duration::from_millis(self.cfg.backoff_max_ms)).max(d),
            None => d,
        }
    }

    pub(crate) fn post_json(&self, path: &str, body: &Value) -> Result<Value, RemoteError> {
        let url = format!("{}{}", self.cfg.base_url.trim_end_matches('/'), path);
        let max_attempts = self.cfg.max_retries + 1;
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let mut req = self.http.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let outcome = req.send();
            let (retry_after, failure) = match outcome {
                Err(e) => {
                    if attempt >= max_attempts {
                        return Err(RemoteError::Network { attempts: attempt, message: e.to_string() });
                    }
                    (None, format!("transport: {e}"))
                }
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let text = resp.text().map_err(|e| RemoteError::Malformed(e.to_string()))?;
                        return serde_json::from_str(&text).map_err(|e| RemoteError::Malformed(e.to_string()));
                    }
                    if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
                        return Err(RemoteError::Auth { status: status.as_u16() });
                    }
                    if status != StatusCode::TOO_MANY_REQUESTS && !status.is_server_error() {
                        let body = resp.text().unwrap_or_default();
                        return Err(RemoteError::Status { status: status.as_u16(), body });
                    }
                    if attempt >= max_attempts {
                        return Err(RemoteError::RetriesExhausted { attempts: attempt, status: status.as_u16() });
                    }
                    let ra = resp
                        .headers()
                        .get(reqwest::header::RETRY_AFTER)
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.trim().parse::<f64>().ok())
                        .map(Duration::from_secs_f64);
                    (ra, format!("HTTP {status}"))
                }
            };
            let wait = self.backoff(attempt - 1, retry_after);
            warn!(%url, attempt, ?wait, "retrying after {failure}");
            std::thread::sleep(wait);
            debug!(%url, attempt, "resending request");
        }
    }
}
