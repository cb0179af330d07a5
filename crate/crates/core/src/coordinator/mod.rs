//! Pipeline orchestration over a shared workspace.
//!
//! Decomposition publishes the sub-questions; chain workers publish
//! `chain:{i}` as they finish; verification waits on every chain key, then
//! synthesis waits on `conflicts`. Failed chains stay in the audit but never
//! reach synthesis.

mod audit;
mod workspace;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audit::{emit_audit, read_audit, AuditError, AuditRecord, VOLATILE_KEYS};
pub use workspace::{AlreadyPublished, Entry, Payload, StageKey, Workspace};

use crate::decompose::{decompose_with, DecomposeError, SubQuestion, DEFAULT_MAX_SUB_QUESTIONS};
use crate::evidence::EvidenceChainSet;
use crate::graph::KnowledgeGraph;
use crate::linker::EntityLinker;
use crate::llm::{Backend, ContextBudget, SamplingParams, DEFAULT_MAX_INPUT_TOKENS};
use crate::prompts::PromptSet;
use crate::retriever::{ChainConfig, ChainRunner, ChainStatus, ConfigError, ReasoningChain};
use crate::synth::{
    default_rules, detect_conflicts, resolve, synthesize_final, ConflictRule, FinalAnswer, Normalizer, SubAnswer,
    SynthError, SynthesisSettings,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSampling {
    pub decompose: SamplingParams,
    pub reason: SamplingParams,
    pub answer: SamplingParams,
    pub synthesize: SamplingParams,
}

impl Default for StageSampling {
    fn default() -> Self {
        Self {
            decompose: SamplingParams::STABLE,
            reason: SamplingParams::REASONING,
            answer: SamplingParams::STABLE,
            synthesize: SamplingParams::STABLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub chain: ChainConfig,
    pub n_q: usize,
    pub max_input_tokens: usize,
    pub max_tokens: usize,
    /// Concurrent chains; `None` runs every sub-question at once.
    pub parallelism: Option<usize>,
    pub sampling: StageSampling,
    pub conflict_rules: Vec<ConflictRule>,
    /// Term to canonical form, applied before conflict detection.
    pub synonyms: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chain: ChainConfig::default(),
            n_q: DEFAULT_MAX_SUB_QUESTIONS,
            max_input_tokens: DEFAULT_MAX_INPUT_TOKENS,
            max_tokens: 2048,
            parallelism: None,
            sampling: StageSampling::default(),
            conflict_rules: default_rules(),
            synonyms: BTreeMap::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.chain.validate()?;
        for (name, v) in [
            ("n_q", self.n_q),
            ("max_input_tokens", self.max_input_tokens),
            ("max_tokens", self.max_tokens),
            ("parallelism", self.parallelism.unwrap_or(1)),
        ] {
            if v == 0 {
                return Err(ConfigError(format!("{name} must be at least 1")));
            }
        }
        if self.conflict_rules.is_empty() {
            return Err(ConfigError("conflict_rules must not be empty".into()));
        }
        for (name, s) in [
            ("decompose", &self.sampling.decompose),
            ("reason", &self.sampling.reason),
            ("answer", &self.sampling.answer),
            ("synthesize", &self.sampling.synthesize),
        ] {
            s.validate().map_err(|e| ConfigError(format!("sampling.{name}: {e}")))?;
        }
        Ok(())
    }
}

/// The configuration recorded in an audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    /// Where the graph was loaded from, if known.
    pub graph: Option<String>,
    pub backend: String,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(#[from] ConfigError),
    #[error("decompose: {source}")]
    Decomposition {
        source: DecomposeError,
        audit: Box<AuditRecord>,
    },
    #[error("all {} chains failed", audit.chains.len())]
    AllChainsFailed { audit: Box<AuditRecord> },
    #[error("synthesize: {source}")]
    Synthesis {
        source: SynthError,
        audit: Box<AuditRecord>,
    },
}

impl PipelineError {
    /// The partial audit, for failures past configuration.
    pub fn audit(&self) -> Option<&AuditRecord> {
        match self {
            PipelineError::Config(_) => None,
            PipelineError::Decomposition { audit, .. }
            | PipelineError::AllChainsFailed { audit }
            | PipelineError::Synthesis { audit, .. } => Some(audit),
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn failed_chain(question: &SubQuestion, reason: String) -> ReasoningChain {
    ReasoningChain {
        sub_question: question.clone(),
        turns: Vec::new(),
        retrieval_count: 0,
        evidence: EvidenceChainSet::new(),
        answer: None,
        status: ChainStatus::Failed,
        error: Some(reason),
        suppressed: false,
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline<'a> {
    pub graph: &'a KnowledgeGraph,
    pub linker: &'a EntityLinker,
    pub prompts: PromptSet,
    pub config: PipelineConfig,
    pub graph_source: Option<String>,
}

impl<'a> Pipeline<'a> {
    pub fn new(graph: &'a KnowledgeGraph, linker: &'a EntityLinker, config: PipelineConfig) -> Self {
        Self {
            graph,
            linker,
            prompts: PromptSet::default(),
            config,
            graph_source: None,
        }
    }

    pub fn with_prompts(mut self, prompts: PromptSet) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_graph_source(mut self, source: impl Into<String>) -> Self {
        self.graph_source = Some(source.into());
        self
    }

    pub fn run(&self, query: &str, backend: &dyn Backend) -> Result<(FinalAnswer, AuditRecord), PipelineError> {
        self.run_in(query, backend, &Workspace::new())
    }

    /// Runs against a caller-owned workspace so stage outputs can be
    /// inspected afterwards.
    pub fn run_in(
        &self,
        query: &str,
        backend: &dyn Backend,
        ws: &Workspace,
    ) -> Result<(FinalAnswer, AuditRecord), PipelineError> {
        self.config.validate()?;
        let cfg = &self.config;
        let normalizer = Normalizer::new(cfg.synonyms.clone());
        let started = Instant::now();
        let mut audit = AuditRecord {
            query: query.to_owned(),
            config: RunSnapshot {
                graph: self.graph_source.clone(),
                backend: backend.name().to_owned(),
                pipeline: cfg.clone(),
            },
            decomposition: None,
            chains: Vec::new(),
            conflicts: Vec::new(),
            final_answer: None,
            cited: Vec::new(),
            timings: BTreeMap::new(),
            started_at: now(),
            finished_at: String::new(),
            error: None,
        };
        let finish = |mut audit: AuditRecord, error: Option<String>| {
            audit.timings.insert("total".into(), started.elapsed().as_secs_f64());
            audit.finished_at = now();
            audit.error = error;
            Box::new(audit)
        };

        let t = Instant::now();
        let decomposition = match decompose_with(
            query,
            cfg.n_q,
            backend,
            &self.prompts.decompose,
            cfg.sampling.decompose,
            cfg.max_tokens,
        ) {
            Ok(d) => d,
            Err(source) => {
                let _ = ws.fail(StageKey::Decomposition, source.to_string(), None);
                audit.timings.insert("decomposition".into(), t.elapsed().as_secs_f64());
                let message = format!("decompose: {source}");
                return Err(PipelineError::Decomposition { source, audit: finish(audit, Some(message)) });
            }
        };
        audit.timings.insert("decomposition".into(), t.elapsed().as_secs_f64());
        publish(ws, StageKey::Decomposition, Payload::Decomposition(decomposition.clone()));
        let questions = decomposition.sub_questions.clone();
        audit.decomposition = Some(decomposition);

        let (chains, chain_timings) = self.run_chains(&questions, backend, ws);
        audit.timings.extend(chain_timings);
        audit.chains = chains;

        let answers: Vec<SubAnswer> = audit
            .chains
            .iter()
            .filter(|c| c.is_completed())
            .filter_map(|c| {
                Some(SubAnswer {
                    sub_question: c.sub_question.clone(),
                    text: normalizer.normalize_text(c.answer.as_deref()?),
                    evidence: c.evidence.clone(),
                })
            })
            .collect();
        if answers.is_empty() {
            let _ = ws.fail(StageKey::Conflicts, "no completed chains", None);
            let message = format!("all {} chains failed", audit.chains.len());
            return Err(PipelineError::AllChainsFailed { audit: finish(audit, Some(message)) });
        }

        let t = Instant::now();
        let conflicts = detect_conflicts(&answers, &cfg.conflict_rules, &normalizer);
        let resolution = resolve(&conflicts, &answers, query);
        for chain in &mut audit.chains {
            chain.suppressed = resolution.suppressed.contains(&chain.sub_question.index);
        }
        audit.conflicts = resolution.reports.clone();
        audit.timings.insert("conflicts".into(), t.elapsed().as_secs_f64());
        publish(ws, StageKey::Conflicts, Payload::Conflicts(resolution.reports));

        let t = Instant::now();
        let settings = SynthesisSettings {
            template: &self.prompts.synthesize,
            sampling: cfg.sampling.synthesize,
            budget: ContextBudget::new(cfg.max_input_tokens),
            max_tokens: cfg.max_tokens,
        };
        let result = synthesize_final(query, &resolution.verified, backend, &settings);
        audit.timings.insert("synthesis".into(), t.elapsed().as_secs_f64());
        match result {
            Ok(answer) => {
                publish(ws, StageKey::Final, Payload::Final(answer.clone()));
                audit.final_answer = Some(answer.text.clone());
                audit.cited = answer.cited.clone();
                Ok((answer, *finish(audit, None)))
            }
            Err(source) => {
                let _ = ws.fail(StageKey::Final, source.to_string(), None);
                let message = format!("synthesize: {source}");
                Err(PipelineError::Synthesis { source, audit: finish(audit, Some(message)) })
            }
        }
    }

    /// Runs every sub-question on a bounded worker pool and waits on the
    /// workspace for all chain keys.
    fn run_chains(
        &self,
        questions: &[SubQuestion],
        backend: &dyn Backend,
        ws: &Workspace,
    ) -> (Vec<ReasoningChain>, BTreeMap<String, f64>) {
        let runner = ChainRunner {
            graph: self.graph,
            linker: self.linker,
            config: self.config.chain,
            prompts: &self.prompts,
            reason_sampling: self.config.sampling.reason,
            answer_sampling: self.config.sampling.answer,
            budget: ContextBudget::new(self.config.max_input_tokens),
            max_tokens: self.config.max_tokens,
        };
        let workers = self.config.parallelism.unwrap_or(questions.len()).clamp(1, questions.len().max(1));
        let next = AtomicUsize::new(0);
        let keys: Vec<StageKey> = questions.iter().map(|q| StageKey::Chain(q.index)).collect();

        let (entries, timings) = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut timings = Vec::new();
                        loop {
                            let n = next.fetch_add(1, Ordering::Relaxed);
                            let Some(q) = questions.get(n) else { break };
                            let t = Instant::now();
                            let outcome = panic::catch_unwind(AssertUnwindSafe(|| runner.run(q, backend)));
                            timings.push((format!("chain:{}", q.index), t.elapsed().as_secs_f64()));
                            let key = StageKey::Chain(q.index);
                            match outcome {
                                Ok(chain) if chain.is_completed() => publish(ws, key, Payload::Chain(chain)),
                                Ok(chain) => {
                                    let reason = chain.error.clone().unwrap_or_default();
                                    let _ = ws.fail(key, reason, Some(Payload::Chain(chain)));
                                }
                                Err(_) => {
                                    let _ = ws.fail(key, "chain worker panicked", None);
                                }
                            }
                        }
                        timings
                    })
                })
                .collect();
            let entries = ws.wait_all(&keys);
            let timings: Vec<(String, f64)> = handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panics are caught inside the worker"))
                .collect();
            (entries, timings)
        });

        let chains = questions
            .iter()
            .zip(entries)
            .map(|(q, entry)| match (entry.payload(), &entry) {
                (Some(Payload::Chain(c)), _) => c.clone(),
                (_, Entry::Failed { reason, .. }) => failed_chain(q, reason.clone()),
                _ => failed_chain(q, "chain produced no result".into()),
            })
            .collect();
        (chains, timings.into_iter().collect())
    }
}

fn publish(ws: &Workspace, key: StageKey, payload: Payload) {
    // each key is owned by exactly one stage of one run
    ws.put(key, payload).expect("stage keys are published once per run");
}

/// Runs the whole pipeline with default prompts and normalization.
pub fn run_pipeline(
    query: &str,
    graph: &KnowledgeGraph,
    config: PipelineConfig,
    backend: &dyn Backend,
) -> Result<(FinalAnswer, AuditRecord), PipelineError> {
    let linker = EntityLinker::new(graph);
    Pipeline::new(graph, &linker, config).run(query, backend)
}

#[derive(Debug)]
pub struct ReplayReport {
    pub recorded: Option<String>,
    pub replayed: Option<String>,
    /// Whether the rerun's audit equals the recorded one outside timings.
    pub identical_audit: bool,
    pub rerun: Option<AuditRecord>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.recorded.is_some() && self.recorded == self.replayed
    }
}

/// Re-executes a recorded run from its own generations.
pub fn replay(record: &AuditRecord, graph: &KnowledgeGraph) -> Result<ReplayReport, AuditError> {
    let backend = record.replay_script()?;
    let linker = EntityLinker::new(graph);
    let mut pipeline = Pipeline::new(graph, &linker, record.config.pipeline.clone());
    pipeline.graph_source = record.config.graph.clone();
    let rerun = match pipeline.run(&record.query, &backend) {
        Ok((_, audit)) => Some(audit),
        Err(e) => e.audit().cloned(),
    };
    Ok(ReplayReport {
        recorded: record.final_answer.clone(),
        replayed: rerun.as_ref().and_then(|a| a.final_answer.clone()),
        identical_audit: rerun.as_ref().is_some_and(|a| a.same_run(record)),
        rerun,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{read_graph, GraphFormat};
    use crate::llm::{ScriptEntry, ScriptedBackend};

    const GRAPH: &str = "\
Diabetes\thas_symptom\tFatigue
Anemia\thas_symptom\tFatigue
Sleep Apnea\tcauses\tFatigue
Sleep Apnea\timpairs\tSleep Quality
";

    fn graph() -> KnowledgeGraph {
        read_graph(GRAPH.as_bytes(), GraphFormat::Tsv).unwrap()
    }

    fn entry(chain: &str, step: usize, content: &str) -> ScriptEntry {
        ScriptEntry { chain: chain.into(), step, content: content.into() }
    }

    fn script(with_chain1_answer: bool) -> ScriptedBackend {
        let mut e = vec![
            entry("root", 0, "1. What causes fatigue? [entities: fatigue]\n2. What impairs sleep quality?"),
            entry("q0", 0, "<|KG_QUERY_BEGIN|>Anemia<|KG_QUERY_END|>"),
            entry("q0", 1, "Anemia causes fatigue. <|FINAL_ANSWER|>"),
            entry("q0:answer", 0, "Anemia can cause fatigue."),
            entry("q1", 0, "<|KG_QUERY_BEGIN|>Sleep Apnea<|KG_QUERY_END|>"),
            entry("root", 1, "Based on your symptoms, consider anemia or sleep apnea."),
        ];
        if with_chain1_answer {
            e.push(entry("q1", 1, "<|FINAL_ANSWER|>"));
            e.push(entry("q1:answer", 0, "Sleep apnea impairs sleep quality."));
        }
        ScriptedBackend::from_entries(e).unwrap()
    }

    #[test]
    fn full_run_publishes_every_stage() {
        let g = graph();
        let linker = EntityLinker::new(&g);
        let ws = Workspace::new();
        let (answer, audit) =
            Pipeline::new(&g, &linker, PipelineConfig::default()).run_in("Why am I tired?", &script(true), &ws).unwrap();
        assert!(answer.text.starts_with("Based on your symptoms"));
        assert_eq!(audit.chains.len(), 2);
        assert!(audit.chains.iter().all(ReasoningChain::is_completed));
        assert_eq!(
            ws.keys(),
            vec![StageKey::Decomposition, StageKey::Chain(0), StageKey::Chain(1), StageKey::Conflicts, StageKey::Final]
        );
        assert!(audit.citations_grounded() && audit.attribution_complete());
        assert_eq!(audit.conflicts, vec![]);
    }

    #[test]
    fn one_failed_chain_degrades() {
        let g = graph();
        let (answer, audit) = run_pipeline("Why am I tired?", &g, PipelineConfig::default(), &script(false)).unwrap();
        assert!(answer.text.starts_with("Based"));
        assert_eq!(audit.chains[1].status, ChainStatus::Failed);
        // the partial trace survives
        assert_eq!(audit.chains[1].turns.len(), 1);
        assert!(audit.chains[1].error.as_deref().unwrap().contains("turn 1: script has no entry for chain \"q1\" step 1"));
        assert!(audit.cited.iter().all(|f| audit.chains[0].evidence.contains(f)));
    }

    #[test]
    fn all_chains_failed_keeps_partial_audit() {
        let g = graph();
        let b = ScriptedBackend::from_entries(vec![entry("root", 0, "NO_DECOMPOSITION")]).unwrap();
        let err = run_pipeline("Why am I tired?", &g, PipelineConfig::default(), &b).unwrap_err();
        let PipelineError::AllChainsFailed { audit } = &err else { panic!("{err}") };
        assert_eq!(audit.chains.len(), 1);
        assert!(audit.final_answer.is_none());
        let back: AuditRecord = serde_json::from_str(&audit.to_json()).unwrap();
        assert_eq!(&back, audit.as_ref());
    }

    #[test]
    fn decomposition_failure_is_a_pipeline_error() {
        let g = graph();
        let err = run_pipeline("q", &g, PipelineConfig::default(), &ScriptedBackend::default()).unwrap_err();
        assert!(matches!(err, PipelineError::Decomposition { .. }));
        assert!(err.audit().unwrap().decomposition.is_none());
    }

    #[test]
    fn reruns_match_outside_timings() {
        let g = graph();
        let cfg = PipelineConfig { parallelism: Some(1), ..PipelineConfig::default() };
        let (_, a) = run_pipeline("Why am I tired?", &g, cfg.clone(), &script(true)).unwrap();
        let (_, b) = run_pipeline("Why am I tired?", &g, PipelineConfig::default(), &script(true)).unwrap();
        // parallelism is part of the recorded config
        assert!(!a.same_run(&b));
        let (_, c) = run_pipeline("Why am I tired?", &g, cfg, &script(true)).unwrap();
        assert!(a.same_run(&c));
        assert!(a.to_json().contains("\"conflicts\": []"));
    }

    #[test]
    fn replay_reproduces_final_answer() {
        let g = graph();
        let (_, audit) = run_pipeline("Why am I tired?", &g, PipelineConfig::default(), &script(false)).unwrap();
        let report = replay(&audit, &g).unwrap();
        assert!(report.matches());
        assert!(report.identical_audit);
    }

    #[test]
    fn audit_round_trips_through_disk() {
        let g = graph();
        let (_, audit) = run_pipeline("Why am I tired?", &g, PipelineConfig::default(), &script(true)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/run.json");
        emit_audit(&audit, &path).unwrap();
        assert_eq!(read_audit(&path).unwrap(), audit);
        let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["query", "config", "decomposition", "chains", "conflicts", "final_answer", "timings", "started_at", "finished_at"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        for key in ["sub_question", "turns", "retrieval_count", "evidence", "answer", "status"] {
            assert!(value["chains"][0].get(key).is_some(), "missing chains[].{key}");
        }
        for key in ["turn_index", "generation", "action", "injected_result"] {
            assert!(value["chains"][0]["turns"][0].get(key).is_some(), "missing turns[].{key}");
        }
    }

    #[test]
    fn invalid_config_rejected_up_front() {
        let g = graph();
        let cfg = PipelineConfig { n_q: 0, ..PipelineConfig::default() };
        assert!(matches!(run_pipeline("q", &g, cfg, &script(true)), Err(PipelineError::Config(_))));
    }
}
