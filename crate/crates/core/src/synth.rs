//! Cross-chain verification and final answer synthesis.
//!
//! Sub-answers are checked against relation-pair rules (by default a drug
//! may not both `treats` and `causes` the same target). When two answers
//! conflict, the one whose evidence scores higher on
//! (chain count, relation breadth, query overlap) is kept, with ties going
//! to the lower sub-question index. Suppressed answers never reach the
//! synthesis prompt.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::SubQuestion;
use crate::evidence::EvidenceChainSet;
use crate::graph::normalize_key;
use crate::llm::{Backend, BackendError, CallKey, ContextBudget, GenerationRequest, Message, SamplingParams};
use crate::prompts::Template;
use crate::retriever::truncate_message;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no verified answers to synthesize from")]
    NoVerifiedAnswers,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("rules file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("rules file: {0}")]
    Io(#[from] std::io::Error),
    #[error("rule set is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubAnswer {
    pub sub_question: SubQuestion,
    pub text: String,
    pub evidence: EvidenceChainSet,
}

impl SubAnswer {
    pub fn index(&self) -> usize {
        self.sub_question.index
    }
}

/// Two relations that must not both connect the same (entity, target) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[String; 2]", into = "[String; 2]")]
pub struct ConflictRule {
    pub first: String,
    pub second: String,
}

impl ConflictRule {
    pub fn new(first: impl Into<String>, second: impl Into<String>) -> Self {
        Self { first: first.into(), second: second.into() }
    }

    pub fn id(&self) -> String {
        format!("{}/{}", self.first, self.second)
    }
}

impl From<[String; 2]> for ConflictRule {
    fn from([first, second]: [String; 2]) -> Self {
        Self { first, second }
    }
}

impl From<ConflictRule> for [String; 2] {
    fn from(r: ConflictRule) -> Self {
        [r.first, r.second]
    }
}

pub fn default_rules() -> Vec<ConflictRule> {
    vec![ConflictRule::new("treats", "causes")]
}

/// Reads a JSON array of two-element relation-name arrays.
pub fn load_rules(path: impl AsRef<Path>) -> Result<Vec<ConflictRule>, RulesError> {
    let rules: Vec<ConflictRule> = serde_json::from_str(&fs::read_to_string(path)?)?;
    if rules.is_empty() {
        return Err(RulesError::Empty);
    }
    Ok(rules)
}

/// Table-driven term normalization. Keys match case-insensitively on word
/// boundaries; the empty table is the identity.
#[derive(Debug, Clone, Default)]
pub struct Normalizer {
    table: BTreeMap<String, String>,
    pattern: Option<Regex>,
}

impl Normalizer {
    pub fn new(table: impl IntoIterator<Item = (String, String)>) -> Self {
        let table: BTreeMap<String, String> = table.into_iter().map(|(k, v)| (normalize_key(&k), v)).collect();
        let mut keys: Vec<&String> = table.keys().filter(|k| !k.is_empty()).collect();
        keys.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let pattern = (!keys.is_empty()).then(|| {
            let alts: Vec<String> = keys
                .iter()
                .map(|k| k.split(' ').map(regex::escape).collect::<Vec<_>>().join(r"\s+"))
                .collect();
            Regex::new(&format!(r"(?i)\b(?:{})\b", alts.join("|"))).expect("escaped alternation is valid")
        });
        Self { table, pattern }
    }

    pub fn canonical(&self, term: &str) -> String {
        self.table.get(&normalize_key(term)).cloned().unwrap_or_else(|| term.to_owned())
    }

    pub fn normalize_text(&self, text: &str) -> String {
        match &self.pattern {
            None => text.to_owned(),
            Some(re) => re
                .replace_all(text, |caps: &regex::Captures<'_>| self.canonical(&caps[0]))
                .into_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictReport {
    /// Sub-question indices, lower first. Equal when one answer's own
    /// evidence is inconsistent.
    pub pair: (usize, usize),
    pub rule: String,
    pub description: String,
    /// Index of the answer kept; set by [`resolve`].
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SupportScore {
    pub chain_count: usize,
    pub relation_breadth: usize,
    pub query_overlap: usize,
}

/// Flags (entity, target) pairs linked by both relations of a rule, within
/// one answer or across two. The output is sorted and does not depend on
/// the order of `answers`.
pub fn detect_conflicts(answers: &[SubAnswer], rules: &[ConflictRule], normalizer: &Normalizer) -> Vec<ConflictReport> {
    // (head, relation, tail) -> answer indices supporting it
    let mut support: BTreeMap<(String, String, String), BTreeSet<usize>> = BTreeMap::new();
    for a in answers {
        for (h, r, t) in a.evidence.triples() {
            let key = (
                normalize_key(&normalizer.canonical(&h)),
                normalize_key(&normalizer.canonical(&r)),
                normalize_key(&normalizer.canonical(&t)),
            );
            support.entry(key).or_default().insert(a.index());
        }
    }

    let mut reports: BTreeMap<((usize, usize), String, String, String), ConflictReport> = BTreeMap::new();
    for rule in rules {
        let first = normalize_key(&normalizer.canonical(&rule.first));
        let second = normalize_key(&normalizer.canonical(&rule.second));
        for ((h, r, t), with_first) in &support {
            if *r != first {
                continue;
            }
            let Some(with_second) = support.get(&(h.clone(), second.clone(), t.clone())) else {
                continue;
            };
            for &i in with_first {
                for &j in with_second {
                    let pair = (i.min(j), i.max(j));
                    let description = format!("{h} both {first} and {second} {t}");
                    reports
                        .entry((pair, rule.id(), h.clone(), t.clone()))
                        .or_insert_with(|| ConflictReport {
                            pair,
                            rule: rule.id(),
                            description,
                            resolution: None,
                        });
                }
            }
        }
    }
    reports.into_values().collect()
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Evidence breadth of one answer relative to the original query.
///
/// `query_overlap` counts distinct evidence entities whose name occurs as a
/// whole-token phrase in the query.
pub fn support_score(answer: &SubAnswer, query: &str) -> SupportScore {
    let chains = answer.evidence.chains();
    let query_tokens = tokens(query);
    let entities: BTreeSet<&str> = chains
        .iter()
        .flat_map(|c| c.steps())
        .flat_map(|t| [t.head.norm_key(), t.tail.norm_key()])
        .collect();
    let query_overlap = entities
        .into_iter()
        .filter(|e| {
            let needle = tokens(e);
            !needle.is_empty() && query_tokens.windows(needle.len()).any(|w| w == needle.as_slice())
        })
        .count();
    SupportScore {
        chain_count: chains.len(),
        relation_breadth: answer.evidence.relation_types().len(),
        query_overlap,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    /// Answers that survived, in sub-question order.
    pub verified: Vec<SubAnswer>,
    pub reports: Vec<ConflictReport>,
    pub suppressed: BTreeSet<usize>,
}

/// Keeps the better-supported side of every cross-answer conflict.
pub fn resolve(conflicts: &[ConflictReport], answers: &[SubAnswer], query: &str) -> Resolution {
    let scores: BTreeMap<usize, SupportScore> = answers.iter().map(|a| (a.index(), support_score(a, query))).collect();
    let zero = SupportScore { chain_count: 0, relation_breadth: 0, query_overlap: 0 };
    let mut suppressed = BTreeSet::new();
    let reports = conflicts
        .iter()
        .map(|c| {
            let (i, j) = c.pair;
            let (si, sj) = (
                scores.get(&i).copied().unwrap_or(zero),
                scores.get(&j).copied().unwrap_or(zero),
            );
            // strict: an exact tie keeps the lower index i
            let kept = if sj > si { j } else { i };
            if i != j {
                suppressed.insert(if kept == i { j } else { i });
            }
            ConflictReport { resolution: Some(kept), ..c.clone() }
        })
        .collect();
    let mut verified: Vec<SubAnswer> = answers.iter().filter(|a| !suppressed.contains(&a.index())).cloned().collect();
    verified.sort_by_key(SubAnswer::index);
    Resolution { verified, reports, suppressed }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    /// Evidence facts that were placed in the synthesis prompt.
    pub cited: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthesisSettings<'a> {
    pub template: &'a Template,
    pub sampling: SamplingParams,
    pub budget: ContextBudget,
    pub max_tokens: usize,
}

fn qa_pairs(verified: &[SubAnswer]) -> String {
    verified
        .iter()
        .enumerate()
        .map(|(n, a)| format!("Q{}: {}\nA{}: {}", n + 1, a.sub_question.text, n + 1, a.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Builds the synthesis prompt, dropping the oldest facts until it fits.
/// Returns the message and the facts it contains.
pub fn synthesis_prompt(query: &str, verified: &[SubAnswer], settings: &SynthesisSettings<'_>) -> (Message, Vec<String>) {
    let mut facts: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for a in verified {
        for f in a.evidence.facts() {
            if seen.insert(f) {
                facts.push(f.to_owned());
            }
        }
    }
    let pairs = qa_pairs(verified);
    let mut start = 0;
    loop {
        let evidence = if start == facts.len() {
            "(no graph evidence)".to_owned()
        } else {
            facts[start..].join("\n")
        };
        let msg = Message::user(settings.template.render(&[
            ("query", query),
            ("qa_pairs", &pairs),
            ("evidence", &evidence),
        ]));
        if settings.budget.fits(std::slice::from_ref(&msg)) {
            return (msg, facts[start..].to_vec());
        }
        if start == facts.len() {
            return (truncate_message(&msg, settings.budget), Vec::new());
        }
        start += 1;
    }
}

pub fn synthesize_final(
    query: &str,
    verified: &[SubAnswer],
    backend: &dyn Backend,
    settings: &SynthesisSettings<'_>,
) -> Result<FinalAnswer, SynthError> {
    if verified.is_empty() {
        return Err(SynthError::NoVerifiedAnswers);
    }
    let (message, cited) = synthesis_prompt(query, verified, settings);
    let response = backend.generate(&GenerationRequest {
        key: CallKey::final_synthesis(),
        messages: vec![message],
        sampling: settings.sampling,
        max_tokens: settings.max_tokens,
    })?;
    Ok(FinalAnswer { text: response.content.trim().to_owned(), cited })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::{verbalize, EvidenceItem, Origin, RetrievalMode};
    use crate::graph::{Chain, EntityId, Triple};
    use crate::llm::{ScriptEntry, ScriptedBackend};
    use crate::prompts::PromptSet;

    fn item(chain: &[(&str, &str, &str)]) -> Vec<EvidenceItem> {
        let steps: Vec<Triple> = chain.iter().map(|(h, r, t)| Triple::new(h, r, t)).collect();
        let chain = Chain::new(steps.clone()).unwrap();
        let mode = if steps.len() == 1 { RetrievalMode::Anchor } else { RetrievalMode::Bridge };
        steps
            .iter()
            .map(|t| EvidenceItem {
                fact: verbalize(t),
                origin: Origin {
                    mode,
                    mentions: vec![chain.source().as_str().into()],
                    entities: vec![chain.source().clone()],
                    chain: chain.clone(),
                },
            })
            .collect()
    }

    fn answer(index: usize, text: &str, chains: &[&[(&str, &str, &str)]]) -> SubAnswer {
        let mut evidence = EvidenceChainSet::new();
        for c in chains {
            evidence.extend(&item(c));
        }
        SubAnswer {
            sub_question: SubQuestion { index, text: format!("question {index}"), seed_entities: vec![] },
            text: text.into(),
            evidence,
        }
    }

    #[test]
    fn treat_and_cause_in_one_answer() {
        let a = answer(0, "x", &[&[("DrugX", "treats", "Headache")], &[("DrugX", "causes", "Headache")]]);
        let c = detect_conflicts(&[a], &default_rules(), &Normalizer::default());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].pair, (0, 0));
        assert_eq!(c[0].rule, "treats/causes");
    }

    #[test]
    fn disjoint_and_agreeing_evidence_is_clean() {
        let a = answer(0, "x", &[&[("A", "treats", "B")]]);
        let b = answer(1, "y", &[&[("C", "causes", "D")]]);
        assert!(detect_conflicts(&[a.clone(), b], &default_rules(), &Normalizer::default()).is_empty());
        let same = answer(1, "y", &[&[("A", "treats", "B")]]);
        assert!(detect_conflicts(&[a, same], &default_rules(), &Normalizer::default()).is_empty());
    }

    #[test]
    fn detection_ignores_answer_order() {
        let a = answer(0, "x", &[&[("DrugX", "treats", "Headache")]]);
        let b = answer(2, "y", &[&[("DrugX", "causes", "Headache")]]);
        let fwd = detect_conflicts(&[a.clone(), b.clone()], &default_rules(), &Normalizer::default());
        let rev = detect_conflicts(&[b, a], &default_rules(), &Normalizer::default());
        assert_eq!(fwd, rev);
        assert_eq!(fwd[0].pair, (0, 2));
    }

    #[test]
    fn normalizer_maps_synonyms_before_matching() {
        let n = Normalizer::new([("Tylenol".to_owned(), "Acetaminophen".to_owned())]);
        let a = answer(0, "x", &[&[("Tylenol", "treats", "Fever")]]);
        let b = answer(1, "y", &[&[("Acetaminophen", "causes", "Fever")]]);
        assert_eq!(detect_conflicts(&[a, b], &default_rules(), &n).len(), 1);
        assert_eq!(n.normalize_text("Take tylenol daily."), "Take Acetaminophen daily.");
        assert_eq!(Normalizer::default().normalize_text("as is"), "as is");
    }

    #[test]
    fn support_score_counts_by_hand() {
        // 3 distinct chains, relations {causes, has_symptom}
        let a = answer(
            0,
            "x",
            &[
                &[("Anemia", "causes", "Fatigue")],
                &[("Diabetes", "has_symptom", "Fatigue")],
                &[("Iron Deficiency", "causes", "Anemia"), ("Anemia", "causes", "Fatigue")],
            ],
        );
        let s = support_score(&a, "Could anemia explain my fatigue?");
        assert_eq!(s, SupportScore { chain_count: 3, relation_breadth: 2, query_overlap: 2 });
        let empty = answer(1, "y", &[]);
        assert_eq!(support_score(&empty, "anything"), SupportScore { chain_count: 0, relation_breadth: 0, query_overlap: 0 });
    }

    #[test]
    fn resolution_prefers_dominant_score() {
        let strong = answer(
            0,
            "strong",
            &[&[("DrugX", "treats", "Headache")], &[("DrugX", "has_symptom", "Rash")], &[("Y", "treats", "Z")]],
        );
        let weak = answer(1, "weak", &[&[("DrugX", "causes", "Headache")]]);
        let answers = [strong, weak];
        let conflicts = detect_conflicts(&answers, &default_rules(), &Normalizer::default());
        let r = resolve(&conflicts, &answers, "headache");
        assert_eq!(r.reports[0].resolution, Some(0));
        assert_eq!(r.suppressed, BTreeSet::from([1]));
        assert_eq!(r.verified.len(), 1);
    }

    #[test]
    fn exact_tie_keeps_lower_index() {
        let a = answer(0, "a", &[&[("DrugX", "treats", "Headache")]]);
        let c = answer(2, "c", &[&[("DrugX", "causes", "Headache")]]);
        let answers = [c, a];
        let conflicts = detect_conflicts(&answers, &default_rules(), &Normalizer::default());
        let r = resolve(&conflicts, &answers, "q");
        assert_eq!(r.reports[0].resolution, Some(0));
        assert_eq!(r.suppressed, BTreeSet::from([2]));
    }

    #[test]
    fn no_conflicts_pass_through() {
        let answers = [answer(1, "b", &[]), answer(0, "a", &[])];
        let r = resolve(&[], &answers, "q");
        assert_eq!(r.verified.iter().map(SubAnswer::index).collect::<Vec<_>>(), vec![0, 1]);
        assert!(r.reports.is_empty() && r.suppressed.is_empty());
    }

    #[test]
    fn rules_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rules.json");
        fs::write(&p, r#"[["treats","causes"],["prevents","causes"]]"#).unwrap();
        let rules = load_rules(&p).unwrap();
        assert_eq!(rules[1], ConflictRule::new("prevents", "causes"));
        fs::write(&p, "[]").unwrap();
        assert!(matches!(load_rules(&p), Err(RulesError::Empty)));
        fs::write(&p, r#"[["only one"]]"#).unwrap();
        assert!(matches!(load_rules(&p), Err(RulesError::Parse(_))));
    }

    fn settings(prompts: &PromptSet, budget: usize) -> SynthesisSettings<'_> {
        SynthesisSettings {
            template: &prompts.synthesize,
            sampling: SamplingParams::STABLE,
            budget: ContextBudget::new(budget),
            max_tokens: 512,
        }
    }

    #[test]
    fn single_answer_synthesis() {
        let prompts = PromptSet::default();
        let b = ScriptedBackend::from_entries(vec![ScriptEntry {
            chain: "root".into(),
            step: 1,
            content: " Based on your symptoms, rest. \n".into(),
        }])
        .unwrap();
        let a = answer(0, "Rest helps.", &[&[("Fatigue", "treated_by", "Rest")]]);
        let f = synthesize_final("Why tired?", &[a], &b, &settings(&prompts, 32_768)).unwrap();
        assert_eq!(f.text, "Based on your symptoms, rest.");
        assert_eq!(f.cited, vec!["Fatigue treated by Rest"]);
        assert!(matches!(
            synthesize_final("q", &[], &b, &settings(&prompts, 32_768)),
            Err(SynthError::NoVerifiedAnswers)
        ));
    }

    #[test]
    fn oversized_evidence_truncated_oldest_first() {
        let prompts = PromptSet::default();
        let answers: Vec<SubAnswer> = (0..4)
            .map(|i| {
                let facts: Vec<(String, String)> =
                    (0..10).map(|j| (format!("Entity{i}x{j}"), format!("Target{i}x{j}"))).collect();
                let chains: Vec<Vec<(&str, &str, &str)>> =
                    facts.iter().map(|(h, t)| vec![(h.as_str(), "has_a_rather_long_relation_name", t.as_str())]).collect();
                let refs: Vec<&[(&str, &str, &str)]> = chains.iter().map(Vec::as_slice).collect();
                answer(i, "ok", &refs)
            })
            .collect();
        assert_eq!(answers.iter().map(|a| a.evidence.len()).sum::<usize>(), 40);

        let (full, all) = synthesis_prompt("q", &answers, &settings(&prompts, 1_000_000));
        assert_eq!(all.len(), 40);
        let full_tokens = ContextBudget::estimate_tokens(std::slice::from_ref(&full));
        let budget = full_tokens - 200;
        let (msg, cited) = synthesis_prompt("q", &answers, &settings(&prompts, budget));
        assert!(ContextBudget::new(budget).fits(std::slice::from_ref(&msg)));
        assert!(cited.len() < 40 && !cited.is_empty());
        // the newest facts survive
        assert_eq!(cited.last(), all.last());
        assert_eq!(&all[40 - cited.len()..], cited.as_slice());
    }

    #[test]
    fn conflict_report_serializes_pair_and_resolution() {
        let r = ConflictReport { pair: (0, 1), rule: "treats/causes".into(), description: "d".into(), resolution: Some(0) };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["pair"], serde_json::json!([0, 1]));
        let _ = EntityId::new("unused");
    }
}
