//! In-memory knowledge graph: a typed, directed multigraph with adjacency
//! indexes in both directions.
//!
//! Entities are kept sorted by their normalized key and relations by name, so
//! the numeric index order used internally *is* the deterministic traversal
//! order. Neighborhood and chain queries therefore never need to sort at
//! query time.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("graph source contains no triples")]
    Empty,
    #[error("entities {first:?} and {second:?} collide under normalization ({key:?})")]
    NormalizationCollision {
        first: String,
        second: String,
        key: String,
    },
    #[error("unknown entity {0:?}")]
    NotFound(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("unknown graph format {0:?} (expected tsv or jsonl)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase, trim and collapse internal whitespace runs to a single space.
pub fn normalize_key(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Canonical entity surface string plus its normalized index key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EntityId {
    id: String,
    norm_key: String,
}

impl EntityId {
    pub fn new(id: impl Into<String>) -> Self {
        let id = id.into();
        let norm_key = normalize_key(&id);
        Self { id, norm_key }
    }

    pub fn as_str(&self) -> &str {
        &self.id
    }

    pub fn norm_key(&self) -> &str {
        &self.norm_key
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

impl Serialize for EntityId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.id)
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d).map(EntityId::new)
    }
}

/// Relation label, always read head to tail.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationType(String);

impl RelationType {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn name(&self) -> &str {
        &self.0
    }

    /// Relation name with underscores read as spaces (`has_symptom` -> `has symptom`).
    pub fn words(&self) -> String {
        self.0.replace('_', " ")
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    #[serde(rename = "h")]
    pub head: EntityId,
    #[serde(rename = "r")]
    pub relation: RelationType,
    #[serde(rename = "t")]
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Self {
            head: EntityId::new(head),
            relation: RelationType::new(relation),
            tail: EntityId::new(tail),
        }
    }
}

/// A directed simple path through the graph. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Chain {
    steps: Vec<Triple>,
}

impl Chain {
    /// Builds a chain, checking connectivity and that no entity repeats.
    pub fn new(steps: Vec<Triple>) -> Option<Self> {
        if steps.is_empty() {
            return None;
        }
        let connected = steps.windows(2).all(|w| w[0].tail == w[1].head);
        let mut seen = HashSet::new();
        seen.insert(steps[0].head.norm_key().to_owned());
        let simple = steps.iter().all(|s| seen.insert(s.tail.norm_key().to_owned()));
        (connected && simple).then_some(Self { steps })
    }

    pub fn single(triple: Triple) -> Self {
        Self { steps: vec![triple] }
    }

    pub fn steps(&self) -> &[Triple] {
        &self.steps
    }

    /// Hop count.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn source(&self) -> &EntityId {
        &self.steps[0].head
    }

    pub fn target(&self) -> &EntityId {
        &self.steps[self.steps.len() - 1].tail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Tsv,
    Jsonl,
}

impl GraphFormat {
    /// `.jsonl`/`.json` means JSON-lines, everything else is TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => GraphFormat::Jsonl,
            _ => GraphFormat::Tsv,
        }
    }
}

impl FromStr for GraphFormat {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(GraphFormat::Tsv),
            "jsonl" => Ok(GraphFormat::Jsonl),
            other => Err(GraphError::UnknownFormat(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct GraphStats {
    pub entities: usize,
    pub triples: usize,
    pub relations: usize,
    /// Total degree (in + out) -> number of entities with that degree.
    pub degree_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone)]
struct Adjacency {
    relation: u32,
    /// Sorted ascending, which is norm_key order.
    nodes: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct RawTriple {
    head: u32,
    relation: u32,
    tail: u32,
}

/// Immutable knowledge graph.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vec<EntityId>,
    by_id: HashMap<String, u32>,
    by_norm: HashMap<String, u32>,
    relations: Vec<RelationType>,
    triples: Vec<RawTriple>,
    out_index: Vec<Vec<Adjacency>>,
    in_index: Vec<Vec<Adjacency>>,
}

#[derive(Deserialize)]
struct JsonTriple {
    h: String,
    r: String,
    t: String,
}

/// Loads a triple file from disk.
pub fn load_graph(path: impl AsRef<Path>, format: GraphFormat) -> Result<KnowledgeGraph, GraphError> {
    let file = File::open(path.as_ref())?;
    read_graph(BufReader::new(file), format)
}

/// Parses a triple stream (TSV or JSON-lines) and builds the indexed graph.
pub fn read_graph<R: Read>(reader: R, format: GraphFormat) -> Result<KnowledgeGraph, GraphError> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let (h, r, t) = match format {
            GraphFormat::Tsv => {
                let fields: Vec<&str> = trimmed.split('\t').collect();
                if fields.len() != 3 {
                    return Err(GraphError::Parse {
                        line: line_no,
                        message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                    });
                }
                (fields[0].to_owned(), fields[1].to_owned(), fields[2].to_owned())
            }
            GraphFormat::Jsonl => {
                let rec: JsonTriple = serde_json::from_str(trimmed).map_err(|e| GraphError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                (rec.h, rec.r, rec.t)
            }
        };
        if [&h, &r, &t].iter().any(|f| f.trim().is_empty()) {
            return Err(GraphError::Parse {
                line: line_no,
                message: "empty head, relation or tail".to_owned(),
            });
        }
        records.push((h, r, t));
    }
    KnowledgeGraph::from_records(records)
}

impl KnowledgeGraph {
    pub fn from_triples<I>(triples: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = Triple>,
    {
        Self::from_records(
            triples
                .into_iter()
                .map(|t| (t.head.id, t.relation.0, t.tail.id))
                .collect(),
        )
    }

    fn from_records(records: Vec<(String, String, String)>) -> Result<Self, GraphError> {
        if records.is_empty() {
            return Err(GraphError::Empty);
        }

        let mut norm_to_id: HashMap<String, String> = HashMap::new();
        let mut relation_names: Vec<String> = Vec::new();
        {
            let mut seen_rel = HashSet::new();
            for (h, r, t) in &records {
                for name in [h, t] {
                    let key = normalize_key(name);
                    match norm_to_id.get(&key) {
                        Some(existing) if existing != name => {
                            let (first, second) = if existing < name {
                                (existing.clone(), name.clone())
                            } else {
                                (name.clone(), existing.clone())
                            };
                            return Err(GraphError::NormalizationCollision { first, second, key });
                        }
                        Some(_) => {}
                        None => {
                            norm_to_id.insert(key, name.clone());
                        }
                    }
                }
                if seen_rel.insert(r.as_str()) {
                    relation_names.push(r.clone());
                }
            }
        }

        let mut entities: Vec<EntityId> = norm_to_id.into_values().map(EntityId::new).collect();
        entities.sort_by(|a, b| a.norm_key.cmp(&b.norm_key));
        relation_names.sort();
        let relations: Vec<RelationType> = relation_names.into_iter().map(RelationType).collect();

        let by_id: HashMap<String, u32> = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i as u32))
            .collect();
        let by_norm: HashMap<String, u32> = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.norm_key.clone(), i as u32))
            .collect();
        let rel_index: HashMap<&str, u32> = relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.name(), i as u32))
            .collect();

        let mut triples: Vec<RawTriple> = records
            .iter()
            .map(|(h, r, t)| RawTriple {
                head: by_id[h.as_str()],
                relation: rel_index[r.as_str()],
                tail: by_id[t.as_str()],
            })
            .collect();
        triples.sort_unstable();
        triples.dedup();

        let n = entities.len();
        let out_index = build_index(n, triples.iter().map(|t| (t.head, t.relation, t.tail)));
        let in_index = build_index(n, triples.iter().map(|t| (t.tail, t.relation, t.head)));

        Ok(Self {
            entities,
            by_id,
            by_norm,
            relations,
            triples,
            out_index,
            in_index,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    /// Entities in norm_key order.
    pub fn entities(&self) -> &[EntityId] {
        &self.entities
    }

    /// Relations in name order.
    pub fn relations(&self) -> &[RelationType] {
        &self.relations
    }

    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        self.triples.iter().map(|t| self.materialize(t.head, t.relation, t.tail))
    }

    /// Looks an entity up by exact id, falling back to its normalized key.
    pub fn entity(&self, name: &str) -> Option<&EntityId> {
        self.index_of(name).map(|i| &self.entities[i as usize])
    }

    pub fn contains_triple(&self, triple: &Triple) -> bool {
        let (Some(h), Some(t)) = (self.index_of(triple.head.as_str()), self.index_of(triple.tail.as_str())) else {
            return false;
        };
        let Ok(r) = self.relations.binary_search(&triple.relation) else {
            return false;
        };
        self.triples
            .binary_search(&RawTriple {
                head: h,
                relation: r as u32,
                tail: t,
            })
            .is_ok()
    }

    fn index_of(&self, name: &str) -> Option<u32> {
        self.by_id
            .get(name)
            .or_else(|| self.by_norm.get(&normalize_key(name)))
            .copied()
    }

    fn require(&self, name: &str) -> Result<u32, GraphError> {
        self.index_of(name).ok_or_else(|| GraphError::NotFound(name.to_owned()))
    }

    fn materialize(&self, head: u32, relation: u32, tail: u32) -> Triple {
        Triple {
            head: self.entities[head as usize].clone(),
            relation: self.relations[relation as usize].clone(),
            tail: self.entities[tail as usize].clone(),
        }
    }

    /// Outgoing neighborhood of `entity`: at most `k` triples per relation,
    /// grouped by relation name, tails in norm_key order.
    pub fn neighbors(&self, entity: &str, k: usize) -> Result<Vec<Triple>, GraphError> {
        if k == 0 {
            return Err(GraphError::InvalidQuery("k must be at least 1".to_owned()));
        }
        let head = self.require(entity)?;
        let mut out = Vec::new();
        for adj in &self.out_index[head as usize] {
            for &tail in adj.nodes.iter().take(k) {
                out.push(self.materialize(head, adj.relation, tail));
            }
        }
        Ok(out)
    }

    /// Incoming triples of `entity`, grouped by relation, heads in norm_key order.
    pub fn incoming(&self, entity: &str) -> Result<Vec<Triple>, GraphError> {
        let tail = self.require(entity)?;
        let mut out = Vec::new();
        for adj in &self.in_index[tail as usize] {
            for &head in &adj.nodes {
                out.push(self.materialize(head, adj.relation, tail));
            }
        }
        Ok(out)
    }

    /// Up to `max_chains` directed simple chains from `from` to `to` of at
    /// most `max_hops` steps.
    ///
    /// Shorter chains come first; chains of equal length are ordered by their
    /// sequence of (relation name, entity norm_key) steps.
    pub fn find_chains(
        &self,
        from: &str,
        to: &str,
        max_hops: usize,
        max_chains: usize,
    ) -> Result<Vec<Chain>, GraphError> {
        if max_hops == 0 || max_chains == 0 {
            return Err(GraphError::InvalidQuery(
                "hop and chain caps must be at least 1".to_owned(),
            ));
        }
        let source = self.require(from)?;
        let target = self.require(to)?;
        if source == target {
            return Err(GraphError::InvalidQuery(
                "chain endpoints must be distinct entities".to_owned(),
            ));
        }

        let dist = self.distances_to(target, max_hops);
        if !dist.contains_key(&source) {
            return Ok(Vec::new());
        }

        let mut found: Vec<Vec<(u32, u32, u32)>> = Vec::new();
        let mut path: Vec<(u32, u32, u32)> = Vec::with_capacity(max_hops);
        let mut on_path: Vec<u32> = vec![source];
        for length in dist[&source] as usize..=max_hops {
            let mut search = ChainSearch {
                graph: self,
                target,
                length,
                limit: max_chains,
                dist: &dist,
                found: &mut found,
            };
            search.descend(source, &mut path, &mut on_path);
            if found.len() >= max_chains {
                break;
            }
        }

        Ok(found
            .into_iter()
            .map(|steps| Chain {
                steps: steps
                    .into_iter()
                    .map(|(h, r, t)| self.materialize(h, r, t))
                    .collect(),
            })
            .collect())
    }

    /// Reverse BFS: hop distance from each entity to `target`, up to `limit`.
    fn distances_to(&self, target: u32, limit: usize) -> HashMap<u32, u8> {
        let mut dist = HashMap::new();
        dist.insert(target, 0u8);
        let mut queue = VecDeque::from([target]);
        while let Some(node) = queue.pop_front() {
            let d = dist[&node];
            if d as usize >= limit {
                continue;
            }
            for adj in &self.in_index[node as usize] {
                for &prev in &adj.nodes {
                    dist.entry(prev).or_insert_with(|| {
                        queue.push_back(prev);
                        d + 1
                    });
                }
            }
        }
        dist
    }

    pub fn stats(&self) -> GraphStats {
        let mut histogram = BTreeMap::new();
        for i in 0..self.entities.len() {
            let degree: usize = self.out_index[i]
                .iter()
                .chain(self.in_index[i].iter())
                .map(|a| a.nodes.len())
                .sum();
            *histogram.entry(degree).or_insert(0) += 1;
        }
        GraphStats {
            entities: self.entities.len(),
            triples: self.triples.len(),
            relations: self.relations.len(),
            degree_histogram: histogram,
        }
    }

    /// Checks that both adjacency indexes agree exactly with the triple set.
    pub fn check_indexes(&self) -> bool {
        let mut from_out = Vec::new();
        let mut from_in = Vec::new();
        for (node, adjs) in self.out_index.iter().enumerate() {
            for a in adjs {
                if !a.nodes.windows(2).all(|w| w[0] < w[1]) {
                    return false;
                }
                from_out.extend(a.nodes.iter().map(|&t| RawTriple {
                    head: node as u32,
                    relation: a.relation,
                    tail: t,
                }));
            }
        }
        for (node, adjs) in self.in_index.iter().enumerate() {
            for a in adjs {
                if !a.nodes.windows(2).all(|w| w[0] < w[1]) {
                    return false;
                }
                from_in.extend(a.nodes.iter().map(|&h| RawTriple {
                    head: h,
                    relation: a.relation,
                    tail: node as u32,
                }));
            }
        }
        from_out.sort_unstable();
        from_in.sort_unstable();
        from_out == self.triples && from_in == self.triples
    }
}

struct ChainSearch<'a> {
    graph: &'a KnowledgeGraph,
    target: u32,
    length: usize,
    limit: usize,
    dist: &'a HashMap<u32, u8>,
    found: &'a mut Vec<Vec<(u32, u32, u32)>>,
}

impl ChainSearch<'_> {
    /// Depth-first walk emitting chains of exactly `self.length` hops in
    /// (relation, norm_key) order. Returns false once the cap is reached.
    fn descend(&mut self, node: u32, path: &mut Vec<(u32, u32, u32)>, on_path: &mut Vec<u32>) -> bool {
        let remaining = self.length - path.len();
        for adj in &self.graph.out_index[node as usize] {
            for &next in &adj.nodes {
                if on_path.contains(&next) {
                    continue;
                }
                if remaining == 1 {
                    if next != self.target {
                        continue;
                    }
                    path.push((node, adj.relation, next));
                    self.found.push(path.clone());
                    path.pop();
                    if self.found.len() >= self.limit {
                        return false;
                    }
                    continue;
                }
                // the target may only appear as the final step
                if next == self.target {
                    continue;
                }
                match self.dist.get(&next) {
                    Some(&d) if (d as usize) < remaining => {}
                    _ => continue,
                }
                path.push((node, adj.relation, next));
                on_path.push(next);
                let more = self.descend(next, path, on_path);
                on_path.pop();
                path.pop();
                if !more {
                    return false;
                }
            }
        }
        true
    }
}

fn build_index(n: usize, edges: impl Iterator<Item = (u32, u32, u32)>) -> Vec<Vec<Adjacency>> {
    let mut grouped: Vec<BTreeMap<u32, Vec<u32>>> = vec![BTreeMap::new(); n];
    for (from, rel, to) in edges {
        grouped[from as usize].entry(rel).or_default().push(to);
    }
    grouped
        .into_iter()
        .map(|by_rel| {
            by_rel
                .into_iter()
                .map(|(relation, mut nodes)| {
                    nodes.sort_unstable();
                    nodes.dedup();
                    Adjacency { relation, nodes }
                })
                .collect()
        })
        .collect()
}
