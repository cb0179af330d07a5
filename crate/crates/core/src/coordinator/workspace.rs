//! Single-assignment shared workspace.
//!
//! Each stage key moves from pending to ready or failed exactly once.
//! Readers never block unless they ask to wait.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use thiserror::Error;

use crate::decompose::DecompositionResult;
use crate::retriever::ReasoningChain;
use crate::synth::{ConflictReport, FinalAnswer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageKey {
    Decomposition,
    Chain(usize),
    Conflicts,
    Final,
}

impl fmt::Display for StageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageKey::Decomposition => f.write_str("decomposition"),
            StageKey::Chain(i) => write!(f, "chain:{i}"),
            StageKey::Conflicts => f.write_str("conflicts"),
            StageKey::Final => f.write_str("final"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Decomposition(DecompositionResult),
    Chain(ReasoningChain),
    Conflicts(Vec<ConflictReport>),
    Final(FinalAnswer),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Pending,
    Ready(Arc<Payload>),
    /// A failure reason plus whatever the stage produced before failing.
    Failed { reason: String, partial: Option<Arc<Payload>> },
}

impl Entry {
    pub fn is_pending(&self) -> bool {
        matches!(self, Entry::Pending)
    }

    /// The ready payload, or the partial payload of a failure.
    pub fn payload(&self) -> Option<&Payload> {
        match self {
            Entry::Pending => None,
            Entry::Ready(p) => Some(p),
            Entry::Failed { partial, .. } => partial.as_deref(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("workspace key {0} was already published")]
pub struct AlreadyPublished(pub String);

#[derive(Debug, Default)]
pub struct Workspace {
    slots: Mutex<BTreeMap<StageKey, Entry>>,
    changed: Condvar,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<StageKey, Entry>> {
        // a panicking writer cannot leave a half-written slot: inserts are atomic
        self.slots.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn publish(&self, key: StageKey, entry: Entry) -> Result<(), AlreadyPublished> {
        let mut slots = self.lock();
        if slots.contains_key(&key) {
            return Err(AlreadyPublished(key.to_string()));
        }
        slots.insert(key, entry);
        drop(slots);
        self.changed.notify_all();
        Ok(())
    }

    pub fn put(&self, key: StageKey, payload: Payload) -> Result<(), AlreadyPublished> {
        self.publish(key, Entry::Ready(Arc::new(payload)))
    }

    pub fn fail(&self, key: StageKey, reason: impl Into<String>, partial: Option<Payload>) -> Result<(), AlreadyPublished> {
        self.publish(key, Entry::Failed { reason: reason.into(), partial: partial.map(Arc::new) })
    }

    pub fn get(&self, key: StageKey) -> Entry {
        self.lock().get(&key).cloned().unwrap_or(Entry::Pending)
    }

    /// Blocks until every key has left the pending state.
    pub fn wait_all(&self, keys: &[StageKey]) -> Vec<Entry> {
        let mut slots = self.lock();
        while keys.iter().any(|k| !slots.contains_key(k)) {
            slots = self.changed.wait(slots).unwrap_or_else(|p| p.into_inner());
        }
        keys.iter().map(|k| slots[k].clone()).collect()
    }

    /// Published keys in key order.
    pub fn keys(&self) -> Vec<StageKey> {
        self.lock().keys().copied().collect()
    }
}
