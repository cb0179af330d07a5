//! Generic chat-completion client over HTTP.
//!
//! Request body: `{model, messages: [{role, content}], temperature, top_p,
//! top_k, repetition_penalty, max_tokens}`. The reply text is read from
//! `choices[0].message.content`. 5xx responses, timeouts and connection
//! failures are retried with exponential backoff; other non-2xx statuses
//! fail immediately.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::warn;

use super::{Backend, BackendError, FinishReason, GenerationRequest, GenerationResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
}

fn default_timeout_secs() -> f64 {
    120.0
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            initial_backoff_ms: default_backoff_ms(),
        }
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    config: HttpConfig,
    client: Client,
    api_key: Option<String>,
}

enum Attempt {
    Done(GenerationResponse),
    Retry(BackendError),
    Fail(BackendError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty());
        Ok(Self { config, client, api_key })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    pub fn request_body(&self, request: &GenerationRequest) -> serde_json::Value {
        json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.sampling.temperature,
            "top_p": request.sampling.top_p,
            "top_k": request.sampling.top_k,
            "repetition_penalty": request.sampling.repetition_penalty,
            "max_tokens": request.max_tokens,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(resp) => resp,
            Err(e) if e.is_timeout() => return Attempt::Retry(BackendError::Timeout),
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Retry(BackendError::Timeout),
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        if status.is_server_error() {
            return Attempt::Retry(BackendError::Status { status: status.as_u16(), body: text });
        }
        if !status.is_success() {
            return Attempt::Fail(BackendError::Status { status: status.as_u16(), body: text });
        }
        match parse_completion(&text) {
            Ok(r) => Attempt::Done(r),
            Err(e) => Attempt::Fail(e),
        }
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

fn parse_completion(text: &str) -> Result<GenerationResponse, BackendError> {
    let body: CompletionBody =
        serde_json::from_str(text).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
    let choice = body
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::InvalidResponse("empty choices array".into()))?;
    let finish_reason = match choice.finish_reason.as_deref() {
        None | Some("stop") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(other) => FinishReason::Error(other.to_owned()),
    };
    let content = match (choice.message.content, &finish_reason) {
        (Some(c), _) => c,
        (None, FinishReason::Error(_)) => String::new(),
        (None, _) => return Err(BackendError::InvalidResponse("choice has no message content".into())),
    };
    Ok(GenerationResponse { content, finish_reason })
}

impl Backend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        request.validate()?;
        let body = self.request_body(request);
        let mut delay = Duration::from_millis(self.config.initial_backoff_ms);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempt >= self.config.max_retries => return Err(e),
                Attempt::Retry(e) => {
                    attempt += 1;
                    warn!(call = %request.key, attempt, error = %e, "retrying generation");
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                }
            }
        }
    }

    fn name(&self) -> &str {
        "http"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_first_choice() {
        let r = parse_completion(r#"{"choices":[{"message":{"role":"assistant","content":"hi"},"finish_reason":"length"},{"message":{"content":"no"}}]}"#).unwrap();
        assert_eq!(r.content, "hi");
        assert_eq!(r.finish_reason, FinishReason::Length);
    }

    #[test]
    fn rejects_empty_choices() {
        assert!(matches!(parse_completion(r#"{"choices":[]}"#), Err(BackendError::InvalidResponse(_))));
        assert!(matches!(parse_completion("oops"), Err(BackendError::InvalidResponse(_))));
    }
}
