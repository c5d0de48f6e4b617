use std::time::Duration;

use log::warn;

use super::wire::CompletionRequest;
use super::Backend;
use crate::error::{Error, Result};

/// Environment variable holding the bearer token for the endpoint.
pub const API_KEY_ENV: &str = "DISTRANK_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Full URL of the completions endpoint.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Total attempts for transport failures, including the first.
    pub attempts: u32,
    pub backoff_base: Duration,
    pub backoff_factor: u32,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_secs(120),
            attempts: 3,
            backoff_base: Duration::from_secs(1),
            backoff_factor: 2,
        }
    }
}

/// Blocking client for a completions endpoint.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.config.endpoint)
            .field("attempts", &self.config.attempts)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn send_once(&self, body: &str) -> Result<String> {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(classify)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(classify)?;
        if !(200..300).contains(&status) {
            return Err(Error::BackendStatus { status, body: text });
        }
        Ok(text)
    }
}

fn classify(e: ureq::Error) -> Error {
    match e {
        ureq::Error::Timeout(t) => Error::Timeout(t.to_string()),
        other => Error::Transport(other.to_string()),
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.config.endpoint)
    }

    fn complete_raw(&self, request: &CompletionRequest) -> Result<String> {
        let body = serde_json::to_string(request)?;
        let attempts = self.config.attempts.max(1);
        let mut delay = self.config.backoff_base;
        let mut attempt = 1;
        loop {
            match self.send_once(&body) {
                Err(e) if e.is_retryable() && attempt < attempts => {
                    warn!(
                        "attempt {attempt}/{attempts} to {} failed: {e}; retrying in {delay:?}",
                        self.config.endpoint
                    );
                    std::thread::sleep(delay);
                    delay *= self.config.backoff_factor;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}
