//! Query decomposition into entity-grounded sub-questions.
//!
//! The model replies either with a numbered list
//!
//! ```text
//! 1. What causes fatigue? [entities: fatigue]
//! 2. Which conditions impair sleep recovery? [entities: sleep quality]
//! ```
//!
//! or with `NO_DECOMPOSITION`. Anything unparseable falls back to the
//! original query as the only sub-question.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{Backend, BackendError, CallKey, GenerationRequest, Message, SamplingParams};
use crate::prompts::{PromptSet, Template};

pub const NO_DECOMPOSITION: &str = "NO_DECOMPOSITION";
pub const DEFAULT_MAX_SUB_QUESTIONS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecomposeError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("sub-question cap must be at least 1")]
    InvalidCap,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no numbered sub-questions found")]
pub struct ParseFailure;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub index: usize,
    pub text: String,
    #[serde(default)]
    pub seed_entities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub sub_questions: Vec<SubQuestion>,
    /// False when the original query is used unchanged.
    pub decomposed: bool,
    /// The model's reply, verbatim.
    pub raw: String,
}

impl DecompositionResult {
    fn fallback(query: &str, raw: String) -> Self {
        Self {
            sub_questions: vec![SubQuestion {
                index: 0,
                text: query.to_owned(),
                seed_entities: Vec::new(),
            }],
            decomposed: false,
            raw,
        }
    }
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\d+[.)]\s*(.*?)\s*$").unwrap())
}

fn entity_bracket() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\[\s*entities\s*:\s*([^\]]*)\]\s*$").unwrap())
}

/// Parses numbered lines `N. question [entities: a; b]`, keeping order and
/// skipping everything else.
pub fn parse_decomposition(text: &str) -> Result<Vec<(String, Vec<String>)>, ParseFailure> {
    let mut out = Vec::new();
    for line in text.lines() {
        let Some(caps) = numbered_line().captures(line) else {
            continue;
        };
        let body = caps.get(1).map_or("", |m| m.as_str());
        let (question, entities) = match entity_bracket().captures(body) {
            Some(b) => {
                let whole = b.get(0).expect("group 0 always present");
                let entities = b[1]
                    .split(';')
                    .map(str::trim)
                    .filter(|e| !e.is_empty())
                    .map(str::to_owned)
                    .collect();
                (body[..whole.start()].trim(), entities)
            }
            None => (body.trim(), Vec::new()),
        };
        if !question.is_empty() {
            out.push((question.to_owned(), entities));
        }
    }
    if out.is_empty() {
        Err(ParseFailure)
    } else {
        Ok(out)
    }
}

/// Turns raw model output into a decomposition, truncating to `n_q`.
/// Never fails: unparseable or declined output yields the fallback.
pub fn interpret(query: &str, raw: String, n_q: usize) -> DecompositionResult {
    if raw.lines().any(|l| l.trim().starts_with(NO_DECOMPOSITION)) {
        return DecompositionResult::fallback(query, raw);
    }
    match parse_decomposition(&raw) {
        Ok(items) => DecompositionResult {
            sub_questions: items
                .into_iter()
                .take(n_q)
                .enumerate()
                .map(|(index, (text, seed_entities))| SubQuestion { index, text, seed_entities })
                .collect(),
            decomposed: true,
            raw,
        },
        Err(ParseFailure) => DecompositionResult::fallback(query, raw),
    }
}

/// Decomposes with the built-in template and stable sampling.
pub fn decompose(query: &str, n_q: usize, backend: &dyn Backend) -> Result<DecompositionResult, DecomposeError> {
    decompose_with(
        query,
        n_q,
        backend,
        &PromptSet::default().decompose,
        SamplingParams::STABLE,
        1024,
    )
}

pub fn decompose_with(
    query: &str,
    n_q: usize,
    backend: &dyn Backend,
    template: &Template,
    sampling: SamplingParams,
    max_tokens: usize,
) -> Result<DecompositionResult, DecomposeError> {
    if query.trim().is_empty() {
        return Err(DecomposeError::EmptyQuery);
    }
    if n_q == 0 {
        return Err(DecomposeError::InvalidCap);
    }
    let request = GenerationRequest {
        key: CallKey::decomposition(),
        messages: vec![Message::user(template.render(&[("query", query)]))],
        sampling,
        max_tokens,
    };
    let response = backend.generate(&request)?;
    Ok(interpret(query, response.content, n_q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptEntry, ScriptedBackend};

    fn scripted(reply: &str) -> ScriptedBackend {
        ScriptedBackend::from_entries(vec![ScriptEntry {
            chain: "root".into(),
            step: 0,
            content: reply.into(),
        }])
        .unwrap()
    }

    const FATIGUE: &str = "Why do I keep feeling fatigued even after sleeping well?";

    #[test]
    fn two_sub_questions() {
        let b = scripted("1. What causes fatigue?\n2. Which conditions impair sleep recovery?");
        let d = decompose(FATIGUE, 4, &b).unwrap();
        assert!(d.decomposed);
        let texts: Vec<&str> = d.sub_questions.iter().map(|q| q.text.as_str()).collect();
        assert_eq!(texts, vec!["What causes fatigue?", "Which conditions impair sleep recovery?"]);
        assert_eq!(d.sub_questions[1].index, 1);
    }

    #[test]
    fn truncates_to_cap() {
        let reply: String = (1..=6).map(|i| format!("{i}. Question {i}?\n")).collect();
        let d = decompose(FATIGUE, 4, &scripted(&reply)).unwrap();
        assert_eq!(d.sub_questions.len(), 4);
        assert_eq!(d.sub_questions[3].text, "Question 4?");
    }

    #[test]
    fn declined_decomposition_falls_back() {
        let d = decompose(FATIGUE, 4, &scripted("NO_DECOMPOSITION")).unwrap();
        assert!(!d.decomposed);
        assert_eq!(d.sub_questions.len(), 1);
        assert_eq!(d.sub_questions[0].text, FATIGUE);
    }

    #[test]
    fn unparseable_reply_falls_back() {
        let d = decompose(FATIGUE, 4, &scripted("Sure! Fatigue has many causes.")).unwrap();
        assert!(!d.decomposed);
        assert_eq!(d.sub_questions[0].text, FATIGUE);
    }

    #[test]
    fn entity_bracket_is_optional() {
        assert_eq!(
            parse_decomposition("1. X? [entities: fatigue]").unwrap(),
            vec![("X?".to_owned(), vec!["fatigue".to_owned()])]
        );
        assert_eq!(
            parse_decomposition("2) Does lead cause neuropathy? [Entities: lead exposure; neuropathy ]").unwrap(),
            vec![(
                "Does lead cause neuropathy?".to_owned(),
                vec!["lead exposure".to_owned(), "neuropathy".to_owned()]
            )]
        );
    }

    #[test]
    fn prose_is_a_parse_failure() {
        assert_eq!(parse_decomposition("just some prose\nwith lines"), Err(ParseFailure));
    }

    #[test]
    fn junk_lines_skipped_in_order() {
        let got = parse_decomposition("Here you go:\n1. A?\n\nnoise\n2. B?\n- bullet\n3. C?").unwrap();
        let qs: Vec<&str> = got.iter().map(|(q, _)| q.as_str()).collect();
        assert_eq!(qs, vec!["A?", "B?", "C?"]);
    }

    #[test]
    fn backend_error_propagates() {
        let empty = ScriptedBackend::default();
        assert!(matches!(decompose(FATIGUE, 4, &empty), Err(DecomposeError::Backend(_))));
        assert_eq!(decompose("  ", 4, &empty), Err(DecomposeError::EmptyQuery));
    }
}
