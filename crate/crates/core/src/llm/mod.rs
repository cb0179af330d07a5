//! Text-generation backends.
//!
//! Every model call in the pipeline goes through [`Backend::generate`]. The
//! request carries a [`CallKey`] naming the logical call site so that a
//! [`ScriptedBackend`] can replay recorded generations without looking at the
//! prompt text, which changes whenever retrieved evidence changes.

mod http;
mod scripted;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use scripted::{load_script, ScriptEntry, ScriptError, ScriptedBackend};

/// Approximate characters per token used for context budgeting.
pub const CHARS_PER_TOKEN: usize = 4;

/// Default maximum prompt size in tokens.
pub const DEFAULT_MAX_INPUT_TOKENS: usize = 32_768;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("script has no entry for chain {chain:?} step {step}")]
    ScriptExhausted { chain: String, step: usize },
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    InvalidResponse(String),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub repetition_penalty: f64,
}

impl SamplingParams {
    /// Settings for the retrieval-reasoning loop.
    pub const REASONING: SamplingParams = SamplingParams {
        temperature: 0.7,
        top_p: 0.8,
        top_k: 20,
        repetition_penalty: 1.05,
    };

    /// Lower-temperature settings for decomposition and synthesis.
    pub const STABLE: SamplingParams = SamplingParams {
        temperature: 0.6,
        ..Self::REASONING
    };

    // negated so NaN is rejected
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(format!("repetition_penalty must be >= 1, got {}", self.repetition_penalty));
        }
        Ok(())
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self::REASONING
    }
}

/// Logical call site: which chain is asking, and at which step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallKey {
    pub chain: String,
    pub step: usize,
}

impl CallKey {
    pub fn new(chain: impl Into<String>, step: usize) -> Self {
        Self { chain: chain.into(), step }
    }

    pub fn decomposition() -> Self {
        Self::new("root", 0)
    }

    pub fn final_synthesis() -> Self {
        Self::new("root", 1)
    }

    pub fn reasoning(index: usize, turn: usize) -> Self {
        Self::new(format!("q{index}"), turn)
    }

    pub fn sub_answer(index: usize) -> Self {
        Self::new(format!("q{index}:answer"), 0)
    }
}

impl fmt::Display for CallKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.chain, self.step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub key: CallKey,
    pub messages: Vec<Message>,
    pub sampling: SamplingParams,
    pub max_tokens: usize,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        self.sampling.validate().map_err(BackendError::InvalidRequest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationResponse {
    pub content: String,
    pub finish_reason: FinishReason,
}

/// A text generator. Implementations must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError>;

    fn name(&self) -> &str;
}

/// Character-count approximation of a prompt's token length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextBudget {
    pub max_input_tokens: usize,
}

impl Default for ContextBudget {
    fn default() -> Self {
        Self { max_input_tokens: DEFAULT_MAX_INPUT_TOKENS }
    }
}

impl ContextBudget {
    pub fn new(max_input_tokens: usize) -> Self {
        Self { max_input_tokens }
    }

    pub fn max_chars(&self) -> usize {
        self.max_input_tokens.saturating_mul(CHARS_PER_TOKEN)
    }

    pub fn estimate_tokens(messages: &[Message]) -> usize {
        let chars: usize = messages.iter().map(|m| m.content.chars().count()).sum();
        chars.div_ceil(CHARS_PER_TOKEN)
    }

    pub fn fits(&self, messages: &[Message]) -> bool {
        Self::estimate_tokens(messages) <= self.max_input_tokens
    }
}
