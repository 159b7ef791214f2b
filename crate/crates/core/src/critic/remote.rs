//! Remote critique endpoint client.
//!
//! Sends the critique prompt to an OpenAI-style `/chat/completions`
//! endpoint and parses the `<score>` verdict out of the reply. Transport
//! failures and unparseable replies are both retried; after the retry
//! budget, transport failures are hard errors while parse failures come
//! back as a verdict with `parse_ok = false` so the trainer can fall back
//! gracefully.

use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::{parse_scores, CritiqueVerdict, VerdictSource};

/// Environment variable holding the endpoint's bearer token. When unset or
/// empty, requests are sent without authorization (useful against mocks).
pub const API_KEY_ENV: &str = "CRITIC_API_KEY";

/// Connection settings for the critique endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticEndpointConfig {
    /// Root URL; `/chat/completions` is appended.
    pub base_url: String,
    /// Model name placed in the request body.
    pub model_name: String,
    /// Per-request timeout.
    pub timeout: Duration,
    /// Retries after the first attempt (2 retries = 3 attempts).
    pub max_retries: usize,
    /// Maximum concurrent in-flight requests for batch scoring.
    pub max_in_flight: usize,
}

impl CriticEndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        CriticEndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            timeout: Duration::from_secs(30),
            max_retries: 2,
            max_in_flight: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_url.is_empty() {
            return Err(Error::Config(
                "critic endpoint base_url must not be empty".into(),
            ));
        }
        if self.max_in_flight < 1 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }

    fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

/// One request attempt: either the reply content or a transport-class
/// failure (connection, timeout, HTTP status, or a reply that is not a
/// chat completion at all).
fn post_once(
    client: &reqwest::blocking::Client,
    config: &CriticEndpointConfig,
    prompt: &str,
) -> std::result::Result<String, String> {
    let body = serde_json::json!({
        "model": config.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0.0,
    });
    let mut request = client.post(config.completions_url()).json(&body);
    if let Ok(key) = std::env::var(API_KEY_ENV) {
        if !key.is_empty() {
            request = request.bearer_auth(key);
        }
    }
    let response = request.send().map_err(|e| e.to_string())?;
    let status = response.status();
    if !status.is_success() {
        return Err(format!("endpoint returned HTTP {status}"));
    }
    let parsed: ChatResponse = response
        .json()
        .map_err(|e| format!("bad response body: {e}"))?;
    parsed
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| "response contained no choices".to_string())
}

/// Score one critique prompt remotely. Each attempt (1 + `max_retries`)
/// sends the prompt and tries to parse a verdict of `expected_n` labels
/// out of the reply. The final attempt decides the outcome: an unparseable
/// reply yields `parse_ok = false` with the raw text attached, while a
/// transport failure is an [`Error::Endpoint`].
pub fn remote_judge(
    config: &CriticEndpointConfig,
    prompt: &str,
    expected_n: usize,
) -> Result<CritiqueVerdict> {
    config.validate()?;
    let client = reqwest::blocking::Client::builder()
        .timeout(config.timeout)
        .build()
        .map_err(|e| Error::Endpoint(format!("failed to build HTTP client: {e}")))?;

    enum LastFailure {
        Transport(String),
        BadContent(String),
    }
    let mut last = LastFailure::Transport("no attempts made".into());
    for _attempt in 0..=config.max_retries {
        match post_once(&client, config, prompt) {
            Ok(content) => match parse_scores(&content, expected_n) {
                Ok(labels) => {
                    return Ok(CritiqueVerdict {
                        labels,
                        source: VerdictSource::Remote,
                        raw_text: Some(content),
                        parse_ok: true,
                    });
                }
                Err(_) => last = LastFailure::BadContent(content),
            },
            Err(e) => last = LastFailure::Transport(e),
        }
    }
    match last {
        LastFailure::BadContent(content) => Ok(CritiqueVerdict {
            labels: Vec::new(),
            source: VerdictSource::Remote,
            raw_text: Some(content),
            parse_ok: false,
        }),
        LastFailure::Transport(e) => Err(Error::Endpoint(format!(
            "request to {} failed after {} attempts: {e}",
            config.completions_url(),
            config.max_retries + 1
        ))),
    }
}

/// Score a batch of prompts with at most `max_in_flight` concurrent
/// requests. Results come back in request order; the first hard failure
/// fails the batch.
pub fn remote_judge_batch(
    config: &CriticEndpointConfig,
    requests: &[(String, usize)],
) -> Result<Vec<CritiqueVerdict>> {
    config.validate()?;
    let mut verdicts = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(config.max_in_flight) {
        let chunk_results: Vec<Result<CritiqueVerdict>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(prompt, expected_n)| {
                    scope.spawn(move || remote_judge(config, prompt, *expected_n))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("critic request thread panicked"))
                .collect()
        });
        for result in chunk_results {
            verdicts.push(result?);
        }
    }
    Ok(verdicts)
}
