//! Deduplicated, verbalized evidence with per-fact provenance.

use std::collections::BTreeSet;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::graph::{Chain, EntityId, RelationType, Triple};

/// Renders a triple as `"{head} {relation words} {tail}"`.
pub fn verbalize(triple: &Triple) -> String {
    format!("{} {} {}", triple.head, triple.relation.words(), triple.tail)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Anchor,
    Bridge,
}

/// Where a fact came from: the retrieval mode, the mentions as the model
/// wrote them, the entities they linked to, and the chain that carried it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub mode: RetrievalMode,
    pub mentions: Vec<String>,
    pub entities: Vec<EntityId>,
    pub chain: Chain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub fact: String,
    pub origin: Origin,
}

/// An origin record attached to the fact at position `fact`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactOrigin {
    pub fact: usize,
    #[serde(flatten)]
    pub origin: Origin,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceChainSet {
    facts: IndexSet<String>,
    origins: Vec<FactOrigin>,
}

impl EvidenceChainSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Facts in first-seen order.
    pub fn facts(&self) -> impl ExactSizeIterator<Item = &str> + DoubleEndedIterator {
        self.facts.iter().map(String::as_str)
    }

    pub fn fact(&self, index: usize) -> Option<&str> {
        self.facts.get_index(index).map(String::as_str)
    }

    pub fn contains(&self, fact: &str) -> bool {
        self.facts.contains(fact)
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn origins(&self) -> &[FactOrigin] {
        &self.origins
    }

    pub fn origins_of<'a>(&'a self, fact: &str) -> impl Iterator<Item = &'a Origin> + 'a {
        let index = self.facts.get_index_of(fact);
        self.origins
            .iter()
            .filter(move |o| Some(o.fact) == index)
            .map(|o| &o.origin)
    }

    /// Distinct chains across all origins, in first-seen order.
    pub fn chains(&self) -> Vec<&Chain> {
        let mut seen = IndexSet::new();
        for o in &self.origins {
            seen.insert(&o.origin.chain);
        }
        seen.into_iter().collect()
    }

    /// Every triple carried by any origin chain.
    pub fn triples(&self) -> BTreeSet<(String, String, String)> {
        self.origins
            .iter()
            .flat_map(|o| o.origin.chain.steps())
            .map(|t| (t.head.as_str().to_owned(), t.relation.name().to_owned(), t.tail.as_str().to_owned()))
            .collect()
    }

    pub fn relation_types(&self) -> BTreeSet<&RelationType> {
        self.origins
            .iter()
            .flat_map(|o| o.origin.chain.steps())
            .map(|t| &t.relation)
            .collect()
    }

    /// Keeps only the newest `keep` facts, dropping origins of the rest.
    pub fn truncated_oldest_first(&self, keep: usize) -> Self {
        let drop = self.facts.len().saturating_sub(keep);
        let facts: IndexSet<String> = self.facts.iter().skip(drop).cloned().collect();
        let origins = self
            .origins
            .iter()
            .filter(|o| o.fact >= drop)
            .map(|o| FactOrigin { fact: o.fact - drop, origin: o.origin.clone() })
            .collect();
        Self { facts, origins }
    }
}

/// Set-union on fact strings, keeping first-seen order. An origin is added
/// unless the identical record is already attached to that fact.
pub fn merge_evidence(existing: &EvidenceChainSet, incoming: &[EvidenceItem]) -> EvidenceChainSet {
    let mut merged = existing.clone();
    merged.extend(incoming);
    merged
}

impl EvidenceChainSet {
    pub fn extend(&mut self, incoming: &[EvidenceItem]) {
        for item in incoming {
            let (fact, _) = self.facts.insert_full(item.fact.clone());
            let record = FactOrigin { fact, origin: item.origin.clone() };
            if !self.origins.contains(&record) {
                self.origins.push(record);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor(t: Triple) -> EvidenceItem {
        EvidenceItem {
            fact: verbalize(&t),
            origin: Origin {
                mode: RetrievalMode::Anchor,
                mentions: vec![t.head.as_str().to_owned()],
                entities: vec![t.head.clone()],
                chain: Chain::single(t),
            },
        }
    }

    fn plain(fact: &str) -> EvidenceItem {
        let mut item = anchor(Triple::new("A", "r", "B"));
        item.fact = fact.to_owned();
        item
    }

    #[test]
    fn verbalization() {
        assert_eq!(verbalize(&Triple::new("Diabetes", "has_symptom", "Fatigue")), "Diabetes has symptom Fatigue");
        assert_eq!(verbalize(&Triple::new("A", "r", "B")), "A r B");
        assert_eq!(verbalize(&Triple::new("X", "is_treated_by", "Y")), "X is treated by Y");
    }

    #[test]
    fn identical_fact_merged_once() {
        let e = merge_evidence(&EvidenceChainSet::new(), &[plain("a"), plain("a")]);
        assert_eq!(e.len(), 1);
        assert_eq!(e.origins().len(), 1);
    }

    #[test]
    fn first_seen_order() {
        let e = merge_evidence(&EvidenceChainSet::new(), &[plain("a"), plain("b")]);
        let e = merge_evidence(&e, &[plain("b"), plain("c")]);
        assert_eq!(e.facts().collect::<Vec<_>>(), vec!["a", "b", "c"]);
    }

    #[test]
    fn anchor_and_bridge_origins_share_a_fact() {
        let ab = Triple::new("A", "r", "B");
        let bc = Triple::new("B", "s", "C");
        let chain = Chain::new(vec![ab.clone(), bc.clone()]).unwrap();
        let bridge: Vec<EvidenceItem> = chain
            .steps()
            .iter()
            .map(|t| EvidenceItem {
                fact: verbalize(t),
                origin: Origin {
                    mode: RetrievalMode::Bridge,
                    mentions: vec!["A".into(), "C".into()],
                    entities: vec![EntityId::new("A"), EntityId::new("C")],
                    chain: chain.clone(),
                },
            })
            .collect();
        let e = merge_evidence(&EvidenceChainSet::new(), &[anchor(ab)]);
        let e = merge_evidence(&e, &bridge);
        assert_eq!(e.facts().collect::<Vec<_>>(), vec!["A r B", "B s C"]);
        let modes: Vec<RetrievalMode> = e.origins_of("A r B").map(|o| o.mode).collect();
        assert_eq!(modes, vec![RetrievalMode::Anchor, RetrievalMode::Bridge]);
        assert_eq!(e.chains().len(), 2);
    }

    #[test]
    fn truncation_keeps_newest() {
        let e = merge_evidence(&EvidenceChainSet::new(), &[plain("a"), plain("b"), plain("c")]);
        let t = e.truncated_oldest_first(2);
        assert_eq!(t.facts().collect::<Vec<_>>(), vec!["b", "c"]);
        assert!(t.origins().iter().all(|o| o.fact < 2));
    }

    #[test]
    fn serde_round_trip() {
        let e = merge_evidence(&EvidenceChainSet::new(), &[anchor(Triple::new("A", "r", "B"))]);
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.contains("\"facts\":[\"A r B\"]"));
        assert_eq!(serde_json::from_str::<EvidenceChainSet>(&json).unwrap(), e);
    }
}
