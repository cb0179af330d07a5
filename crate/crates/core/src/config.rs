//! TOML run configuration.
//!
//! ```toml
//! prompts_dir = "prompts"     # optional template overrides
//! conflict_rules = "rules.json"
//! synonyms = "synonyms.json"  # {"term": "canonical term", ...}
//! audit_dir = "audits"
//!
//! [graph]
//! path = "toy.tsv"            # required
//! format = "tsv"              # optional, inferred from the extension
//!
//! [backend]
//! kind = "scripted"           # required: scripted | http
//! script = "run.jsonl"        # scripted: a file, or a directory of <id>.jsonl
//! # endpoint = "http://localhost:8000/v1/chat/completions"   # http
//! # model = "qwq-32b"                                         # http
//! # api_key_env = "LLM_API_KEY"
//!
//! [pipeline]                  # every key optional
//! max_turns = 10
//! n_q = 4
//! n_r = 5
//! k = 10
//! h = 3
//! n = 5
//! tau = 0.7
//!
//! [sampling.synthesize]       # per stage: decompose, reason, answer, synthesize
//! temperature = 0.6
//! ```
//!
//! Relative paths resolve against the config file's directory. Command-line
//! overrides are applied before required keys are checked.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::coordinator::PipelineConfig;
use crate::graph::{GraphError, GraphFormat};
use crate::llm::{HttpConfig, SamplingParams};
use crate::prompts::{PromptSet, TemplateError};
use crate::synth::{load_rules, RulesError};

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("missing required config keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Rules(#[from] RulesError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    graph: RawGraph,
    #[serde(default)]
    backend: RawBackend,
    #[serde(default)]
    pipeline: RawPipeline,
    #[serde(default)]
    sampling: RawSampling,
    prompts_dir: Option<PathBuf>,
    conflict_rules: Option<PathBuf>,
    synonyms: Option<PathBuf>,
    audit_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    path: Option<PathBuf>,
    format: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackend {
    kind: Option<String>,
    script: Option<PathBuf>,
    endpoint: Option<String>,
    model: Option<String>,
    api_key_env: Option<String>,
    timeout_secs: Option<f64>,
    max_retries: Option<u32>,
    initial_backoff_ms: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPipeline {
    max_turns: Option<usize>,
    n_q: Option<usize>,
    n_r: Option<usize>,
    k: Option<usize>,
    h: Option<usize>,
    n: Option<usize>,
    tau: Option<f64>,
    max_input_tokens: Option<usize>,
    max_tokens: Option<usize>,
    parallelism: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSampling {
    decompose: Option<RawParams>,
    reason: Option<RawParams>,
    answer: Option<RawParams>,
    synthesize: Option<RawParams>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    temperature: Option<f64>,
    top_p: Option<f64>,
    top_k: Option<u32>,
    repetition_penalty: Option<f64>,
}

impl RawParams {
    fn apply(&self, base: &mut SamplingParams) {
        if let Some(v) = self.temperature {
            base.temperature = v;
        }
        if let Some(v) = self.top_p {
            base.top_p = v;
        }
        if let Some(v) = self.top_k {
            base.top_k = v;
        }
        if let Some(v) = self.repetition_penalty {
            base.repetition_penalty = v;
        }
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub graph: Option<PathBuf>,
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub max_turns: Option<usize>,
    pub n_q: Option<usize>,
    pub n_r: Option<usize>,
    pub k: Option<usize>,
    pub h: Option<usize>,
    pub n: Option<usize>,
    pub tau: Option<f64>,
    pub parallelism: Option<usize>,
    pub prompts_dir: Option<PathBuf>,
    pub conflict_rules: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub audit_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendConfig {
    /// A script file, or a directory holding one `<id>.jsonl` per job.
    Scripted { script: PathBuf },
    Http(HttpConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub graph_path: PathBuf,
    pub graph_format: GraphFormat,
    pub backend: BackendConfig,
    /// Includes the rules and synonyms read from their files.
    pub pipeline: PipelineConfig,
    pub prompts_dir: Option<PathBuf>,
    pub conflict_rules_path: Option<PathBuf>,
    pub audit_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self, ConfigFileError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigFileError::Io { path: path.to_owned(), source })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base, overrides)
    }

    /// Parses config text; relative paths in it resolve against `base`.
    /// Override paths are taken as given.
    pub fn parse(text: &str, base: &Path, overrides: &Overrides) -> Result<Self, ConfigFileError> {
        let mut raw: RawConfig = toml::from_str(text)?;
        let rebase = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        raw.graph.path = raw.graph.path.map(rebase);
        raw.backend.script = raw.backend.script.map(rebase);
        raw.prompts_dir = raw.prompts_dir.map(rebase);
        raw.conflict_rules = raw.conflict_rules.map(rebase);
        raw.synonyms = raw.synonyms.map(rebase);
        raw.audit_dir = raw.audit_dir.map(rebase);
        apply_overrides(&mut raw, overrides);

        let mut missing = Vec::new();
        if raw.graph.path.is_none() {
            missing.push("graph.path".to_owned());
        }
        match raw.backend.kind.as_deref() {
            None => missing.push("backend.kind".to_owned()),
            Some("scripted") if raw.backend.script.is_none() => missing.push("backend.script".to_owned()),
            Some("http") => {
                if raw.backend.endpoint.is_none() {
                    missing.push("backend.endpoint".to_owned());
                }
                if raw.backend.model.is_none() {
                    missing.push("backend.model".to_owned());
                }
            }
            _ => {}
        }
        if !missing.is_empty() {
            return Err(ConfigFileError::MissingKeys(missing));
        }

        let graph_path = raw.graph.path.expect("checked above");
        let graph_format = match raw.graph.format.as_deref() {
            Some(f) => f.parse().map_err(|e: GraphError| ConfigFileError::Invalid(e.to_string()))?,
            None => GraphFormat::from_path(&graph_path),
        };
        let backend = build_backend(raw.backend)?;

        let mut pipeline = PipelineConfig::default();
        let p = &raw.pipeline;
        let c = &mut pipeline.chain;
        c.max_turns = p.max_turns.unwrap_or(c.max_turns);
        c.n_r = p.n_r.unwrap_or(c.n_r);
        c.k = p.k.unwrap_or(c.k);
        c.h = p.h.unwrap_or(c.h);
        c.n = p.n.unwrap_or(c.n);
        c.tau = p.tau.unwrap_or(c.tau);
        pipeline.n_q = p.n_q.unwrap_or(pipeline.n_q);
        pipeline.max_input_tokens = p.max_input_tokens.unwrap_or(pipeline.max_input_tokens);
        pipeline.max_tokens = p.max_tokens.unwrap_or(pipeline.max_tokens);
        pipeline.parallelism = p.parallelism.or(pipeline.parallelism);
        let s = &mut pipeline.sampling;
        for (raw, params) in [
            (&raw.sampling.decompose, &mut s.decompose),
            (&raw.sampling.reason, &mut s.reason),
            (&raw.sampling.answer, &mut s.answer),
            (&raw.sampling.synthesize, &mut s.synthesize),
        ] {
            if let Some(r) = raw {
                r.apply(params);
            }
        }
        if let Some(rules) = &raw.conflict_rules {
            pipeline.conflict_rules = load_rules(rules)?;
        }
        if let Some(path) = &raw.synonyms {
            let text = fs::read_to_string(path).map_err(|source| ConfigFileError::Io { path: path.clone(), source })?;
            pipeline.synonyms = serde_json::from_str(&text)
                .map_err(|e| ConfigFileError::Invalid(format!("{}: {e}", path.display())))?;
        }
        pipeline.validate().map_err(|e| ConfigFileError::Invalid(e.0))?;

        Ok(RunConfig {
            graph_path,
            graph_format,
            backend,
            pipeline,
            prompts_dir: raw.prompts_dir,
            conflict_rules_path: raw.conflict_rules,
            audit_dir: raw.audit_dir,
        })
    }

    pub fn prompts(&self) -> Result<PromptSet, ConfigFileError> {
        Ok(match &self.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir)?,
            None => PromptSet::default(),
        })
    }
}

fn apply_overrides(raw: &mut RawConfig, o: &Overrides) {
    fn set<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
        if v.is_some() {
            *slot = v.clone();
        }
    }
    set(&mut raw.graph.path, &o.graph);
    set(&mut raw.backend.script, &o.script);
    set(&mut raw.backend.endpoint, &o.endpoint);
    set(&mut raw.backend.model, &o.model);
    let p = &mut raw.pipeline;
    set(&mut p.max_turns, &o.max_turns);
    set(&mut p.n_q, &o.n_q);
    set(&mut p.n_r, &o.n_r);
    set(&mut p.k, &o.k);
    set(&mut p.h, &o.h);
    set(&mut p.n, &o.n);
    set(&mut p.tau, &o.tau);
    set(&mut p.parallelism, &o.parallelism);
    set(&mut raw.prompts_dir, &o.prompts_dir);
    set(&mut raw.conflict_rules, &o.conflict_rules);
    set(&mut raw.synonyms, &o.synonyms);
    set(&mut raw.audit_dir, &o.audit_dir);
}

fn build_backend(raw: RawBackend) -> Result<BackendConfig, ConfigFileError> {
    let http_keys = [
        ("endpoint", raw.endpoint.is_some()),
        ("model", raw.model.is_some()),
        ("api_key_env", raw.api_key_env.is_some()),
        ("timeout_secs", raw.timeout_secs.is_some()),
        ("max_retries", raw.max_retries.is_some()),
        ("initial_backoff_ms", raw.initial_backoff_ms.is_some()),
    ];
    match raw.kind.as_deref() {
        Some("scripted") => {
            if let Some((key, _)) = http_keys.iter().find(|(_, set)| *set) {
                return Err(ConfigFileError::Invalid(format!(
                    "backend.{key} is an http setting but backend.kind is scripted"
                )));
            }
            Ok(BackendConfig::Scripted { script: raw.script.expect("checked by caller") })
        }
        Some("http") => {
            if raw.script.is_some() {
                return Err(ConfigFileError::Invalid(
                    "backend.script is a scripted setting but backend.kind is http".into(),
                ));
            }
            let mut http = HttpConfig::new(raw.endpoint.expect("checked"), raw.model.expect("checked"));
            http.api_key_env = raw.api_key_env;
            http.timeout_secs = raw.timeout_secs.unwrap_or(http.timeout_secs);
            http.max_retries = raw.max_retries.unwrap_or(http.max_retries);
            http.initial_backoff_ms = raw.initial_backoff_ms.unwrap_or(http.initial_backoff_ms);
            Ok(BackendConfig::Http(http))
        }
        Some(other) => Err(ConfigFileError::Invalid(format!(
            "backend.kind must be scripted or http, got {other:?}"
        ))),
        None => unreachable!("checked by caller"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retriever::ChainConfig;

    const MINIMAL: &str = r#"
[graph]
path = "g.tsv"
[backend]
kind = "scripted"
script = "s.jsonl"
"#;

    fn parse(text: &str) -> Result<RunConfig, ConfigFileError> {
        RunConfig::parse(text, Path::new("/cfg"), &Overrides::default())
    }

    #[test]
    fn omitted_keys_take_default_hyperparameters() {
        let c = parse(MINIMAL).unwrap();
        let chain = c.pipeline.chain;
        assert_eq!(
            (chain.max_turns, c.pipeline.n_q, chain.n_r, chain.k, chain.h, chain.n, chain.tau),
            (10, 4, 5, 10, 3, 5, 0.7)
        );
        assert_eq!(chain, ChainConfig::default());
        assert_eq!(c.pipeline.sampling.reason, SamplingParams::REASONING);
        assert_eq!(c.pipeline.sampling.synthesize.temperature, 0.6);
        assert_eq!(c.graph_path, Path::new("/cfg/g.tsv"));
        assert_eq!(c.backend, BackendConfig::Scripted { script: "/cfg/s.jsonl".into() });
    }

    #[test]
    fn missing_keys_are_listed() {
        match parse("[pipeline]\nk = 3\n") {
            Err(ConfigFileError::MissingKeys(keys)) => assert_eq!(keys, ["graph.path", "backend.kind"]),
            other => panic!("{other:?}"),
        }
        match parse("[graph]\npath='g'\n[backend]\nkind='http'\n") {
            Err(ConfigFileError::MissingKeys(keys)) => assert_eq!(keys, ["backend.endpoint", "backend.model"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_win_and_can_fill_required_keys() {
        let o = Overrides { graph: Some("flag.tsv".into()), k: Some(2), tau: Some(0.9), ..Overrides::default() };
        let c = RunConfig::parse("[backend]\nkind='scripted'\nscript='s'\n[pipeline]\nk=7\n", Path::new(""), &o).unwrap();
        assert_eq!(c.graph_path, Path::new("flag.tsv"));
        assert_eq!((c.pipeline.chain.k, c.pipeline.chain.tau), (2, 0.9));
    }

    #[test]
    fn exactly_one_backend() {
        let both = format!("{MINIMAL}endpoint = 'http://x'\n");
        assert!(matches!(parse(&both), Err(ConfigFileError::Invalid(_))));
        assert!(matches!(
            parse("[graph]\npath='g'\n[backend]\nkind='magic'\n"),
            Err(ConfigFileError::Invalid(_))
        ));
    }

    #[test]
    fn http_backend_and_partial_sampling() {
        let c = parse(
            "[graph]\npath='g.jsonl'\n[backend]\nkind='http'\nendpoint='http://h'\nmodel='m'\nmax_retries=1\n\
             [sampling.reason]\ntemperature=0.2\n",
        )
        .unwrap();
        let BackendConfig::Http(h) = c.backend else { panic!() };
        assert_eq!((h.model.as_str(), h.max_retries), ("m", 1));
        assert_eq!(c.graph_format, GraphFormat::Jsonl);
        assert_eq!(c.pipeline.sampling.reason.temperature, 0.2);
        assert_eq!(c.pipeline.sampling.reason.top_k, 20);
    }

    #[test]
    fn unknown_and_invalid_values_rejected() {
        assert!(matches!(parse(&format!("{MINIMAL}[pipeline]\nkk = 1\n")), Err(ConfigFileError::Syntax(_))));
        assert!(matches!(parse(&format!("{MINIMAL}[pipeline]\nh = 0\n")), Err(ConfigFileError::Invalid(_))));
        assert!(matches!(parse(&format!("{MINIMAL}[pipeline]\ntau = 1.5\n")), Err(ConfigFileError::Invalid(_))));
    }

    #[test]
    fn rules_file_is_read() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("rules.json"), r#"[["prevents","causes"]]"#).unwrap();
        fs::write(dir.path().join("run.toml"), format!("conflict_rules = 'rules.json'\n{MINIMAL}")).unwrap();
        let c = RunConfig::load(dir.path().join("run.toml"), &Overrides::default()).unwrap();
        assert_eq!(c.pipeline.conflict_rules[0].first, "prevents");
        fs::write(dir.path().join("syn.json"), r#"{"Advil": "Ibuprofen"}"#).unwrap();
        fs::write(dir.path().join("run.toml"), format!("synonyms = 'syn.json'\n{MINIMAL}")).unwrap();
        let c = RunConfig::load(dir.path().join("run.toml"), &Overrides::default()).unwrap();
        assert_eq!(c.pipeline.synonyms["Advil"], "Ibuprofen");
    }
}
