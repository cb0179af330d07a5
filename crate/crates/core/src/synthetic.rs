//! Seeded generator for synthetic graphs with exact entity, triple and
//! relation counts. Used for scale testing and the examples.

use std::collections::HashSet;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{GraphError, KnowledgeGraph, Triple};

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ra", "tu", "vo", "zen", "pha", "dro", "ste", "xil", "mor", "bex", "cy", "qua",
];

const RELATIONS: &[&str] = &[
    "has_symptom",
    "causes",
    "treats",
    "affects",
    "diagnosed_by",
    "risk_factor_of",
    "complication_of",
    "contraindicated_with",
    "located_in",
    "interacts_with",
    "prevents",
    "subtype_of",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub triples: usize,
    pub relations: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Scale of the small English medical graph (1,122 / 5,802 / 6).
    pub const EMCKG: SyntheticSpec = SyntheticSpec {
        entities: 1_122,
        triples: 5_802,
        relations: 6,
        seed: 7,
    };

    /// Scale of the large Chinese medical graph (62,282 / 506,490 / 12).
    pub const CMCKG: SyntheticSpec = SyntheticSpec {
        entities: 62_282,
        triples: 506_490,
        relations: 12,
        seed: 11,
    };

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

pub fn entity_name(index: usize) -> String {
    let mut word = String::new();
    let mut x = index.wrapping_mul(2_654_435_761) ^ 0x5bd1;
    for _ in 0..3 {
        word.push_str(SYLLABLES[x % SYLLABLES.len()]);
        x /= SYLLABLES.len();
    }
    let mut chars = word.chars();
    let first = chars.next().map(|c| c.to_ascii_uppercase()).unwrap_or('X');
    format!("{first}{} {index}", chars.as_str())
}

pub fn relation_name(index: usize) -> String {
    match RELATIONS.get(index) {
        Some(name) => (*name).to_owned(),
        None => format!("relation_{index}"),
    }
}

/// Generates exactly `spec.triples` distinct triples touching exactly
/// `spec.entities` entities and `spec.relations` relation types.
///
/// A ring over all entities guarantees coverage; the rest are drawn with
/// heads skewed toward low indices so the degree distribution has a tail.
pub fn generate(spec: SyntheticSpec) -> Result<Vec<Triple>, GraphError> {
    let SyntheticSpec {
        entities: n,
        triples: m,
        relations: rels,
        seed,
    } = spec;
    if n < 2 || rels == 0 || m < n || m < rels {
        return Err(GraphError::InvalidQuery(format!(
            "cannot generate {m} triples over {n} entities and {rels} relations"
        )));
    }
    let capacity = n as u128 * (n as u128 - 1) * rels as u128;
    if m as u128 > capacity {
        return Err(GraphError::InvalidQuery(format!(
            "{m} triples exceed the {capacity} possible"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<(u32, u32, u32)> = HashSet::with_capacity(m);
    let mut raw = Vec::with_capacity(m);
    for i in 0..n {
        let t = (i as u32, (i % rels) as u32, ((i + 1) % n) as u32);
        seen.insert(t);
        raw.push(t);
    }
    while raw.len() < m {
        let u: f64 = rng.gen();
        let head = ((u * u) * n as f64) as u32 % n as u32;
        let tail = rng.gen_range(0..n as u32);
        if head == tail {
            continue;
        }
        let rel = rng.gen_range(0..rels as u32);
        if seen.insert((head, rel, tail)) {
            raw.push((head, rel, tail));
        }
    }

    let names: Vec<String> = (0..n).map(entity_name).collect();
    let rel_names: Vec<String> = (0..rels).map(relation_name).collect();
    Ok(raw
        .into_iter()
        .map(|(h, r, t)| Triple::new(&names[h as usize], &rel_names[r as usize], &names[t as usize]))
        .collect())
}

pub fn generate_graph(spec: SyntheticSpec) -> Result<KnowledgeGraph, GraphError> {
    KnowledgeGraph::from_triples(generate(spec)?)
}

/// Writes triples in the tab-separated triple-file format.
pub fn write_tsv<W: Write>(triples: &[Triple], mut out: W) -> io::Result<()> {
    for t in triples {
        writeln!(out, "{}\t{}\t{}", t.head, t.relation, t.tail)?;
    }
    out.flush()
}
