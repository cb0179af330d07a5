//! Per-sub-question retrieval-reasoning loop.
//!
//! Each turn the model either terminates, issues a search block, or emits a
//! malformed block. Searches run against the graph while the retrieval
//! budget lasts; after that every further search is answered with
//! `max_limit_reached`. The loop never exceeds `max_turns` generations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::SubQuestion;
use crate::evidence::{verbalize, EvidenceChainSet, EvidenceItem, Origin, RetrievalMode};
use crate::graph::{Chain, EntityId, KnowledgeGraph};
use crate::linker::{EntityLinker, LinkResult};
use crate::llm::{Backend, CallKey, ContextBudget, GenerationRequest, Message, SamplingParams};
use crate::prompts::PromptSet;
use crate::protocol::{
    detect_termination, extract_search_block, render_result_block, ControlSignal, ResultPayload, SearchBlock,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub max_turns: usize,
    pub n_r: usize,
    pub k: usize,
    pub h: usize,
    pub n: usize,
    pub tau: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            max_turns: 10,
            n_r: 5,
            k: 10,
            h: 3,
            n: 5,
            tau: 0.7,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid chain config: {0}")]
pub struct ConfigError(pub String);

impl ChainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("max_turns", self.max_turns),
            ("n_r", self.n_r),
            ("k", self.k),
            ("h", self.h),
            ("n", self.n),
        ] {
            if v == 0 {
                return Err(ConfigError(format!("{name} must be at least 1")));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ConfigError(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TurnAction {
    Searched { block: SearchBlock },
    Control { signal: ControlSignal },
    Malformed { reason: String },
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_index: usize,
    pub generation: String,
    pub action: TurnAction,
    pub injected_result: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub sub_question: SubQuestion,
    pub turns: Vec<TurnRecord>,
    pub retrieval_count: usize,
    pub evidence: EvidenceChainSet,
    pub answer: Option<String>,
    pub status: ChainStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Set when conflict resolution drops this chain's answer.
    #[serde(default)]
    pub suppressed: bool,
}

impl ReasoningChain {
    pub fn is_completed(&self) -> bool {
        self.status == ChainStatus::Completed
    }
}

/// Result of one graph lookup, before rendering.
#[derive(Debug, Clone, PartialEq)]
pub enum SearchOutcome {
    Found {
        /// Lines shown to the model.
        lines: Vec<String>,
        /// Atomic facts with provenance, merged into the evidence set.
        items: Vec<EvidenceItem>,
    },
    NoEntityMatch,
    NoPath,
}

impl SearchOutcome {
    pub fn payload(&self) -> ResultPayload {
        match self {
            SearchOutcome::Found { lines, .. } => ResultPayload::Facts(lines.clone()),
            SearchOutcome::NoEntityMatch => ResultPayload::Signal(ControlSignal::NoEntityMatch),
            SearchOutcome::NoPath => ResultPayload::Facts(Vec::new()),
        }
    }

    /// In-band fact strings as the model sees them.
    pub fn facts(&self) -> Vec<String> {
        match self {
            SearchOutcome::Found { lines, .. } => lines.clone(),
            SearchOutcome::NoEntityMatch => vec![crate::protocol::NO_ENTITY_MATCH.to_owned()],
            SearchOutcome::NoPath => vec![crate::protocol::NO_PATH_FOUND.to_owned()],
        }
    }

    pub fn items(&self) -> &[EvidenceItem] {
        match self {
            SearchOutcome::Found { items, .. } => items,
            _ => &[],
        }
    }
}

/// Links the block's mentions and runs an anchor or bridge lookup.
/// Every failure is reported in-band.
pub fn kg_search(block: &SearchBlock, graph: &KnowledgeGraph, linker: &EntityLinker, cfg: &ChainConfig) -> SearchOutcome {
    let mut entities = Vec::with_capacity(block.mentions.len());
    for m in &block.mentions {
        match linker.link(m, cfg.tau) {
            Ok(LinkResult::Matched { entity, .. }) => entities.push(entity),
            Ok(LinkResult::NoMatch) | Err(_) => return SearchOutcome::NoEntityMatch,
        }
    }
    let mentions: Vec<String> = block.mentions.iter().map(|m| m.as_str().to_owned()).collect();
    match entities.as_slice() {
        [e] => anchor(graph, e, mentions, cfg),
        // both mentions resolved to one entity: nothing to bridge
        [a, b] if a == b => anchor(graph, a, mentions, cfg),
        [a, b] => bridge(graph, a, b, mentions, cfg),
        _ => SearchOutcome::NoEntityMatch,
    }
}

fn anchor(graph: &KnowledgeGraph, entity: &EntityId, mentions: Vec<String>, cfg: &ChainConfig) -> SearchOutcome {
    let triples = match graph.neighbors(entity.as_str(), cfg.k) {
        Ok(t) if !t.is_empty() => t,
        _ => return SearchOutcome::NoPath,
    };
    let mut lines = Vec::with_capacity(triples.len());
    let mut items = Vec::with_capacity(triples.len());
    for t in triples {
        let fact = verbalize(&t);
        lines.push(fact.clone());
        items.push(EvidenceItem {
            fact,
            origin: Origin {
                mode: RetrievalMode::Anchor,
                mentions: mentions.clone(),
                entities: vec![entity.clone()],
                chain: Chain::single(t),
            },
        });
    }
    SearchOutcome::Found { lines, items }
}

fn bridge(
    graph: &KnowledgeGraph,
    from: &EntityId,
    to: &EntityId,
    mentions: Vec<String>,
    cfg: &ChainConfig,
) -> SearchOutcome {
    let chains = match graph.find_chains(from.as_str(), to.as_str(), cfg.h, cfg.n) {
        Ok(c) if !c.is_empty() => c,
        _ => return SearchOutcome::NoPath,
    };
    let mut lines = Vec::new();
    let mut items = Vec::new();
    for chain in chains {
        let facts: Vec<String> = chain.steps().iter().map(verbalize).collect();
        lines.push(facts.join("; "));
        lines.push(format!("chain {} -> {} ({} hops)", from, to, chain.len()));
        for fact in facts {
            items.push(EvidenceItem {
                fact,
                origin: Origin {
                    mode: RetrievalMode::Bridge,
                    mentions: mentions.clone(),
                    entities: vec![from.clone(), to.clone()],
                    chain: chain.clone(),
                },
            });
        }
    }
    SearchOutcome::Found { lines, items }
}

fn evidence_text(evidence: &EvidenceChainSet) -> String {
    if evidence.is_empty() {
        "(none yet)".to_owned()
    } else {
        evidence.facts().collect::<Vec<_>>().join("\n")
    }
}

/// Everything a chain needs besides the sub-question and the backend.
#[derive(Debug, Clone, Copy)]
pub struct ChainRunner<'a> {
    pub graph: &'a KnowledgeGraph,
    pub linker: &'a EntityLinker,
    pub config: ChainConfig,
    pub prompts: &'a PromptSet,
    pub reason_sampling: SamplingParams,
    pub answer_sampling: SamplingParams,
    pub budget: ContextBudget,
    pub max_tokens: usize,
}

impl<'a> ChainRunner<'a> {
    pub fn new(graph: &'a KnowledgeGraph, linker: &'a EntityLinker, prompts: &'a PromptSet) -> Self {
        Self {
            graph,
            linker,
            config: ChainConfig::default(),
            prompts,
            reason_sampling: SamplingParams::REASONING,
            answer_sampling: SamplingParams::STABLE,
            budget: ContextBudget::default(),
            max_tokens: 2048,
        }
    }

    pub fn with_config(mut self, config: ChainConfig) -> Self {
        self.config = config;
        self
    }

    /// Runs the loop to completion. A backend failure stops the chain and
    /// marks it failed; the partial trace and evidence are kept.
    pub fn run(&self, question: &SubQuestion, backend: &dyn Backend) -> ReasoningChain {
        let cfg = &self.config;
        let mut chain = ReasoningChain {
            sub_question: question.clone(),
            turns: Vec::new(),
            retrieval_count: 0,
            evidence: EvidenceChainSet::new(),
            answer: None,
            status: ChainStatus::Completed,
            error: None,
            suppressed: false,
        };

        let mut t = 0;
        while t < cfg.max_turns {
            let request = GenerationRequest {
                key: CallKey::reasoning(question.index, t),
                messages: self.reasoning_messages(question, &chain),
                sampling: self.reason_sampling,
                max_tokens: self.max_tokens,
            };
            let generation = match backend.generate(&request) {
                Ok(r) => r.content,
                Err(e) => {
                    chain.status = ChainStatus::Failed;
                    chain.error = Some(format!("turn {t}: {e}"));
                    return chain;
                }
            };

            if detect_termination(&generation) {
                chain.turns.push(TurnRecord {
                    turn_index: t,
                    generation,
                    action: TurnAction::Terminated,
                    injected_result: None,
                });
                break;
            }

            let (action, payload) = match extract_search_block(&generation) {
                Ok(Some(_)) if chain.retrieval_count >= cfg.n_r => {
                    let signal = ControlSignal::MaxLimitReached;
                    (TurnAction::Control { signal }, ResultPayload::Signal(signal))
                }
                Ok(Some(block)) => {
                    let outcome = kg_search(&block, self.graph, self.linker, cfg);
                    chain.evidence.extend(outcome.items());
                    chain.retrieval_count += 1;
                    (TurnAction::Searched { block }, outcome.payload())
                }
                // detect_termination already covers the no-block case
                Ok(None) => unreachable!("generation without a query delimiter is a termination"),
                Err(e) => (TurnAction::Malformed { reason: e.to_string() }, ResultPayload::Malformed),
            };
            chain.turns.push(TurnRecord {
                turn_index: t,
                generation,
                action,
                injected_result: Some(render_result_block(&payload)),
            });
            t += 1;
        }

        let request = GenerationRequest {
            key: CallKey::sub_answer(question.index),
            messages: self.answer_messages(question, &chain.evidence),
            sampling: self.answer_sampling,
            max_tokens: self.max_tokens,
        };
        match backend.generate(&request) {
            Ok(r) => chain.answer = Some(r.content.trim().to_owned()),
            Err(e) => {
                chain.status = ChainStatus::Failed;
                chain.error = Some(format!("answer: {e}"));
            }
        }
        chain
    }

    /// Prompt for the next reasoning step, trimmed to the context budget by
    /// dropping the oldest result blocks, then the oldest generations, then
    /// the oldest evidence facts.
    pub fn reasoning_messages(&self, question: &SubQuestion, chain: &ReasoningChain) -> Vec<Message> {
        let mut history: Vec<Option<Message>> = Vec::new();
        for turn in &chain.turns {
            history.push(Some(Message::assistant(turn.generation.clone())));
            if let Some(block) = &turn.injected_result {
                history.push(Some(Message::user(block.clone())));
            }
        }
        let mut evidence = chain.evidence.clone();
        loop {
            let head = Message::user(self.prompts.reason.render(&[
                ("sub_question", &question.text),
                ("evidence_so_far", &evidence_text(&evidence)),
            ]));
            let messages: Vec<Message> = std::iter::once(head).chain(history.iter().flatten().cloned()).collect();
            if self.budget.fits(&messages) {
                return messages;
            }
            let oldest_result = history
                .iter()
                .position(|m| matches!(m, Some(m) if m.role == crate::llm::Role::User));
            let oldest_any = history.iter().position(Option::is_some);
            if let Some(i) = oldest_result.or(oldest_any) {
                history[i] = None;
            } else if !evidence.is_empty() {
                evidence = evidence.truncated_oldest_first(evidence.len() - 1);
            } else {
                return vec![truncate_message(&messages[0], self.budget)];
            }
        }
    }

    pub fn answer_messages(&self, question: &SubQuestion, evidence: &EvidenceChainSet) -> Vec<Message> {
        let mut evidence = evidence.clone();
        loop {
            let msg = Message::user(self.prompts.answer.render(&[
                ("sub_question", &question.text),
                ("evidence", &evidence_text(&evidence)),
            ]));
            if self.budget.fits(std::slice::from_ref(&msg)) {
                return vec![msg];
            }
            if evidence.is_empty() {
                return vec![truncate_message(&msg, self.budget)];
            }
            evidence = evidence.truncated_oldest_first(evidence.len() - 1);
        }
    }
}

pub(crate) fn truncate_message(msg: &Message, budget: ContextBudget) -> Message {
    Message {
        role: msg.role,
        content: msg.content.chars().take(budget.max_chars()).collect(),
    }
}

/// Runs one chain with default prompts, sampling and budget.
pub fn run_chain(question: &SubQuestion, graph: &KnowledgeGraph, cfg: ChainConfig, backend: &dyn Backend) -> ReasoningChain {
    let linker = EntityLinker::new(graph);
    let prompts = PromptSet::default();
    ChainRunner::new(graph, &linker, &prompts).with_config(cfg).run(question, backend)
}
