//! Soft entity linking: map a free-text mention onto the most similar graph
//! entity, provided the similarity clears the threshold.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{normalize_key, EntityId, KnowledgeGraph};

/// Scores closer than this are treated as tied and fall back to norm_key order.
const TIE_EPSILON: f64 = 1e-12;

/// Boundary marker placed on both sides of the normalized string.
const PAD: char = '\u{1}';

pub const DEFAULT_DIM: usize = 1 << 20;

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("cannot link against an empty graph")]
    EmptyGraph,
}

/// A mention as it appeared inside a search block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mention(String);

impl Mention {
    pub fn new(text: impl Into<String>) -> Result<Self, LinkError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(LinkError::EmptyText);
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Mention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Sparse nonnegative vector of fixed dimension. Entries are sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl EmbeddingVector {
    /// Builds a vector from (index, value) pairs; duplicates are summed and
    /// zeros dropped. Panics on an index outside `dim` or a negative value.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut entries: Vec<(u32, f64)> = pairs.into_iter().collect();
        assert!(
            entries.iter().all(|&(i, v)| (i as usize) < dim && v >= 0.0),
            "embedding entries must be in range and nonnegative"
        );
        entries.sort_by_key(|&(i, _)| i);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
        for (i, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        merged.retain(|&(_, v)| v > 0.0);
        Self { dim, entries: merged }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nonzero(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn scaled(&self, factor: f64) -> Self {
        assert!(factor > 0.0, "scale factor must be positive");
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|&(i, v)| (i, v * factor)).collect(),
        }
    }

    fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum()
    }
}

/// Cosine similarity. Nonnegative inputs keep it in [0, 1].
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, LinkError> {
    if a.dim != b.dim {
        return Err(LinkError::DimensionMismatch(a.dim, b.dim));
    }
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < a.entries.len() && j < b.entries.len() {
        let (ia, va) = a.entries[i];
        let (ib, vb) = b.entries[j];
        match ia.cmp(&ib) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += va * vb;
                i += 1;
                j += 1;
            }
        }
    }
    let denom = (a.norm_sq() * b.norm_sq()).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / denom).clamp(0.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LinkError>;
}

/// Character-trigram term frequencies of the normalized, boundary-padded
/// string, hashed (FNV-1a) into a fixed number of buckets.
#[derive(Debug, Clone)]
pub struct TrigramEmbedder {
    dim: usize,
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM }
    }
}

impl TrigramEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0 && dim <= u32::MAX as usize);
        Self { dim }
    }

    /// Trigrams of the padded normalized text, in order, with repeats.
    pub fn trigrams(text: &str) -> Vec<String> {
        let norm = normalize_key(text);
        if norm.is_empty() {
            return Vec::new();
        }
        let chars: Vec<char> = std::iter::once(PAD).chain(norm.chars()).chain(std::iter::once(PAD)).collect();
        chars.windows(3).map(|w| w.iter().collect()).collect()
    }

    pub fn bucket(&self, trigram: &str) -> u32 {
        (fnv1a(trigram.as_bytes()) % self.dim as u64) as u32
    }
}

impl Embedder for TrigramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, LinkError> {
        let grams = Self::trigrams(text);
        if grams.is_empty() {
            return Err(LinkError::EmptyText);
        }
        Ok(EmbeddingVector::from_pairs(
            self.dim,
            grams.iter().map(|g| (self.bucket(g), 1.0)),
        ))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LinkResult {
    Matched { entity: EntityId, score: f64 },
    NoMatch,
}

impl LinkResult {
    pub fn entity(&self) -> Option<&EntityId> {
        match self {
            LinkResult::Matched { entity, .. } => Some(entity),
            LinkResult::NoMatch => None,
        }
    }
}

/// Exhaustive-scan linker over precomputed entity embeddings.
pub struct EntityLinker {
    embedder: Box<dyn Embedder>,
    // in graph order, i.e. ascending norm_key
    index: Vec<(EntityId, EmbeddingVector)>,
}

impl fmt::Debug for EntityLinker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EntityLinker")
            .field("entities", &self.index.len())
            .field("dim", &self.embedder.dim())
            .finish()
    }
}

impl EntityLinker {
    pub fn new(graph: &KnowledgeGraph) -> Self {
        Self::with_embedder(graph, Box::new(TrigramEmbedder::default()))
    }

    pub fn with_embedder(graph: &KnowledgeGraph, embedder: Box<dyn Embedder>) -> Self {
        let index = graph
            .entities()
            .iter()
            .map(|e| {
                let v = embedder
                    .embed(e.as_str())
                    .expect("graph entity ids are nonempty");
                (e.clone(), v)
            })
            .collect();
        Self { embedder, index }
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    /// Best-scoring entity for `mention` if its score reaches `tau`.
    /// Ties go to the smaller norm_key.
    pub fn link(&self, mention: &Mention, tau: f64) -> Result<LinkResult, LinkError> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(LinkError::InvalidThreshold(tau));
        }
        if self.index.is_empty() {
            return Err(LinkError::EmptyGraph);
        }
        let query = self.embedder.embed(mention.as_str())?;
        let mut best: Option<(usize, f64)> = None;
        for (i, (_, v)) in self.index.iter().enumerate() {
            let s = similarity(&query, v)?;
            match best {
                Some((_, b)) if s <= b + TIE_EPSILON => {}
                _ => best = Some((i, s)),
            }
        }
        let (i, score) = best.expect("index is nonempty");
        if score >= tau {
            Ok(LinkResult::Matched {
                entity: self.index[i].0.clone(),
                score,
            })
        } else {
            Ok(LinkResult::NoMatch)
        }
    }
}

/// One-shot convenience: builds a linker for `graph` and links a single mention.
pub fn link(mention: &Mention, graph: &KnowledgeGraph, tau: f64) -> Result<LinkResult, LinkError> {
    EntityLinker::new(graph).link(mention, tau)
}
