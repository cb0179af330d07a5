//! Machine-readable record of one pipeline run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RunSnapshot;
use crate::decompose::DecompositionResult;
use crate::llm::{CallKey, ScriptEntry, ScriptError, ScriptedBackend};
use crate::retriever::ReasoningChain;
use crate::synth::ConflictReport;

/// Top-level keys excluded from determinism comparisons.
pub const VOLATILE_KEYS: [&str; 3] = ["timings", "started_at", "finished_at"];

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit file: {0}")]
    Io(#[from] std::io::Error),
    #[error("audit file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("audit cannot be replayed: {0}")]
    Replay(#[from] ScriptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub query: String,
    pub config: RunSnapshot,
    /// Absent only when decomposition itself failed.
    pub decomposition: Option<DecompositionResult>,
    pub chains: Vec<ReasoningChain>,
    pub conflicts: Vec<ConflictReport>,
    pub final_answer: Option<String>,
    /// Evidence facts placed in the synthesis prompt.
    #[serde(default)]
    pub cited: Vec<String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub started_at: String,
    pub finished_at: String,
    /// Why the run stopped early, if it did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AuditRecord {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("audit records are always serializable");
        s.push('\n');
        s
    }

    /// The record without timings and timestamps, as compact JSON.
    pub fn deterministic_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("audit records are always serializable");
        if let Some(obj) = value.as_object_mut() {
            for key in VOLATILE_KEYS {
                obj.remove(key);
            }
        }
        serde_json::to_string(&value).expect("values are always serializable")
    }

    pub fn same_run(&self, other: &AuditRecord) -> bool {
        self.deterministic_json() == other.deterministic_json()
    }

    /// Every fact in any chain's evidence has at least one origin.
    pub fn attribution_complete(&self) -> bool {
        self.chains.iter().all(|c| (0..c.evidence.len()).all(|i| c.evidence.origins().iter().any(|o| o.fact == i)))
    }

    /// Every cited fact occurs in some chain's evidence.
    pub fn citations_grounded(&self) -> bool {
        self.cited.iter().all(|f| self.chains.iter().any(|c| c.evidence.contains(f)))
    }

    /// A scripted backend that answers every call this run made with the
    /// reply recorded for it.
    pub fn replay_script(&self) -> Result<ScriptedBackend, AuditError> {
        let mut entries = Vec::new();
        let mut add = |key: CallKey, content: &str| {
            entries.push(ScriptEntry { chain: key.chain, step: key.step, content: content.to_owned() })
        };
        if let Some(d) = &self.decomposition {
            add(CallKey::decomposition(), &d.raw);
        }
        for chain in &self.chains {
            let i = chain.sub_question.index;
            for turn in &chain.turns {
                add(CallKey::reasoning(i, turn.turn_index), &turn.generation);
            }
            if let Some(answer) = &chain.answer {
                add(CallKey::sub_answer(i), answer);
            }
        }
        if let Some(text) = &self.final_answer {
            add(CallKey::final_synthesis(), text);
        }
        Ok(ScriptedBackend::from_entries(entries)?)
    }
}

/// Writes pretty JSON, creating parent directories as needed.
pub fn emit_audit(record: &AuditRecord, path: impl AsRef<Path>) -> Result<(), AuditError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, record.to_json())?;
    Ok(())
}

pub fn read_audit(path: impl AsRef<Path>) -> Result<AuditRecord, AuditError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
