//! Deterministic backend that replays generations keyed by (chain, step).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Backend, BackendError, CallKey, FinishReason, GenerationRequest, GenerationResponse};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("{path}line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("duplicate script entry for chain {chain:?} step {step}")]
    Duplicate { chain: String, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub chain: String,
    pub step: usize,
    pub content: String,
}

#[derive(Debug, Default)]
pub struct ScriptedBackend {
    replies: HashMap<CallKey, String>,
    served: Mutex<BTreeMap<CallKey, usize>>,
}

impl ScriptedBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = ScriptEntry>) -> Result<Self, ScriptError> {
        let mut replies = HashMap::new();
        for e in entries {
            let key = CallKey::new(e.chain, e.step);
            if replies.contains_key(&key) {
                return Err(ScriptError::Duplicate { chain: key.chain, step: key.step });
            }
            replies.insert(key, e.content);
        }
        Ok(Self { replies, served: Mutex::default() })
    }

    /// Parses JSON-lines script text. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        Self::parse_named(text, None)
    }

    fn parse_named(text: &str, path: Option<&Path>) -> Result<Self, ScriptError> {
        let prefix = path.map(|p| format!("{}: ", p.display())).unwrap_or_default();
        let mut entries = Vec::new();
        let mut seen = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| ScriptError::Parse {
                path: prefix.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if let Some(first) = seen.insert((entry.chain.clone(), entry.step), i + 1) {
                return Err(ScriptError::Parse {
                    path: prefix,
                    line: i + 1,
                    message: format!(
                        "duplicate entry for chain {:?} step {} (first on line {first})",
                        entry.chain, entry.step
                    ),
                });
            }
            entries.push(entry);
        }
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }

    /// Entries in (chain, step) order.
    pub fn entries(&self) -> Vec<ScriptEntry> {
        let mut keys: Vec<&CallKey> = self.replies.keys().collect();
        keys.sort();
        keys.into_iter()
            .map(|k| ScriptEntry {
                chain: k.chain.clone(),
                step: k.step,
                content: self.replies[k].clone(),
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in self.entries() {
            serde_json::to_writer(&mut out, &e)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    /// How many times each key has been requested so far.
    pub fn served(&self) -> BTreeMap<CallKey, usize> {
        self.served.lock().expect("served map poisoned").clone()
    }

    /// Scripted keys that were never requested.
    pub fn unused(&self) -> Vec<CallKey> {
        let served = self.served.lock().expect("served map poisoned");
        let mut keys: Vec<CallKey> = self
            .replies
            .keys()
            .filter(|k| !served.contains_key(*k))
            .cloned()
            .collect();
        keys.sort();
        keys
    }
}

/// Reads a JSON-lines script file.
pub fn load_script(path: impl AsRef<Path>) -> Result<ScriptedBackend, ScriptError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    ScriptedBackend::parse_named(&text, Some(path))
}

impl Backend for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        request.validate()?;
        *self
            .served
            .lock()
            .expect("served map poisoned")
            .entry(request.key.clone())
            .or_insert(0) += 1;
        match self.replies.get(&request.key) {
            Some(content) => Ok(GenerationResponse {
                content: content.clone(),
                finish_reason: FinishReason::Stop,
            }),
            None => Err(BackendError::ScriptExhausted {
                chain: request.key.chain.clone(),
                step: request.key.step,
            }),
        }
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Message, SamplingParams};

    fn request(chain: &str, step: usize) -> GenerationRequest {
        GenerationRequest {
            key: CallKey::new(chain, step),
            messages: vec![Message::user("hi")],
            sampling: SamplingParams::REASONING,
            max_tokens: 64,
        }
    }

    #[test]
    fn replays_by_key_then_exhausts() {
        let b = ScriptedBackend::parse(
            "{\"chain\":\"q1\",\"step\":0,\"content\":\"first\"}\n\n{\"chain\":\"q1\",\"step\":1,\"content\":\"second\"}\n",
        )
        .unwrap();
        assert_eq!(b.generate(&request("q1", 0)).unwrap().content, "first");
        assert_eq!(b.generate(&request("q1", 1)).unwrap().content, "second");
        assert_eq!(
            b.generate(&request("q1", 2)),
            Err(BackendError::ScriptExhausted { chain: "q1".into(), step: 2 })
        );
    }

    #[test]
    fn root_entry() {
        let b = ScriptedBackend::parse("{\"chain\":\"root\",\"step\":0,\"content\":\"1. A?\"}").unwrap();
        assert_eq!(b.generate(&request("root", 0)).unwrap().content, "1. A?");
        assert!(b.unused().is_empty());
    }

    #[test]
    fn duplicate_key_is_a_parse_error() {
        let text = "{\"chain\":\"q0\",\"step\":0,\"content\":\"a\"}\n{\"chain\":\"q0\",\"step\":0,\"content\":\"b\"}\n";
        match ScriptedBackend::parse(text) {
            Err(ScriptError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_json_reports_line() {
        let text = "{\"chain\":\"q0\",\"step\":0,\"content\":\"a\"}\nnot json\n";
        assert!(matches!(ScriptedBackend::parse(text), Err(ScriptError::Parse { line: 2, .. })));
    }

    #[test]
    fn entries_round_trip_through_jsonl() {
        let b = ScriptedBackend::from_entries(vec![
            ScriptEntry { chain: "q1".into(), step: 0, content: "x\ny".into() },
            ScriptEntry { chain: "q0".into(), step: 3, content: "z".into() },
        ])
        .unwrap();
        let mut buf = Vec::new();
        b.write_jsonl(&mut buf).unwrap();
        let again = ScriptedBackend::parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(again.entries(), b.entries());
        assert_eq!(b.entries()[0].chain, "q0");
    }
}
