//! Command-line entry points.
//!
//! Exit status: 0 success, 1 pipeline or runtime failure, 2 usage error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::config::{BackendConfig, ConfigFileError, Overrides, RunConfig};
use crate::coordinator::{emit_audit, read_audit, replay, AuditRecord, Pipeline};
use crate::graph::{load_graph, GraphFormat, KnowledgeGraph};
use crate::linker::EntityLinker;
use crate::llm::{load_script, Backend, HttpBackend};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mirage", version, about = "Multi-chain question answering over a knowledge graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Inspect a graph file.
    Kg {
        #[command(subcommand)]
        action: KgAction,
    },
    /// Answer one query and write its audit record.
    Ask {
        #[arg(long)]
        query: String,
        #[arg(long)]
        config: PathBuf,
        /// Directory for the audit file; defaults to the config's audit_dir.
        #[arg(long)]
        audit_out: Option<PathBuf>,
        /// Audit file name without extension.
        #[arg(long, default_value = "ask")]
        id: String,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Answer every `{"id","query"}` line of a JSON-lines file.
    Batch {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Re-run a recorded audit from its own generations and compare answers.
    Replay {
        #[arg(long)]
        audit: PathBuf,
        /// Graph to use instead of the one named in the audit.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum KgAction {
    /// Print entity, triple and relation counts and the degree histogram.
    Stats(GraphArgs),
    /// Load the graph and check its indexes.
    Validate(GraphArgs),
}

#[derive(Debug, Args)]
struct GraphArgs {
    path: PathBuf,
    /// tsv or jsonl; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<GraphFormat>,
}

#[derive(Debug, Args, Default)]
struct OverrideArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_turns: Option<usize>,
    #[arg(long)]
    n_q: Option<usize>,
    #[arg(long)]
    n_r: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    prompts_dir: Option<PathBuf>,
    #[arg(long)]
    conflict_rules: Option<PathBuf>,
    #[arg(long)]
    synonyms: Option<PathBuf>,
}

impl OverrideArgs {
    fn into_overrides(self, audit_dir: Option<PathBuf>) -> Overrides {
        Overrides {
            graph: self.graph,
            script: self.script,
            endpoint: self.endpoint,
            model: self.model,
            max_turns: self.max_turns,
            n_q: self.n_q,
            n_r: self.n_r,
            k: self.k,
            h: self.h,
            n: self.n,
            tau: self.tau,
            parallelism: self.parallelism,
            prompts_dir: self.prompts_dir,
            conflict_rules: self.conflict_rules,
            synonyms: self.synonyms,
            audit_dir,
        }
    }
}

/// A failure with the exit status it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_FAILURE, message: message.into() }
    }
}

impl From<ConfigFileError> for Failure {
    fn from(e: ConfigFileError) -> Self {
        match e {
            ConfigFileError::Template(_) | ConfigFileError::Rules(_) => Failure::runtime(e.to_string()),
            _ => Failure::usage(e.to_string()),
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_command<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Kg { action } => kg(action, out),
        Command::Ask { query, config, audit_out, id, overrides } => {
            ask(&query, &config, &id, overrides.into_overrides(audit_out), out, err)
        }
        Command::Batch { input, config, out: dir, jobs, overrides } => {
            batch(&input, &config, &dir, jobs, overrides.into_overrides(Some(dir.clone())), out)
        }
        Command::Replay { audit, graph } => replay_cmd(&audit, graph.as_deref(), out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn load(path: &Path, format: GraphFormat) -> Result<KnowledgeGraph, Failure> {
    load_graph(path, format).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn kg(action: KgAction, out: &mut dyn Write) -> Result<i32, Failure> {
    let (args, stats_only) = match action {
        KgAction::Stats(a) => (a, true),
        KgAction::Validate(a) => (a, false),
    };
    let format = args.format.unwrap_or_else(|| GraphFormat::from_path(&args.path));
    let graph = load(&args.path, format)?;
    let stats = graph.stats();
    if stats_only {
        let _ = writeln!(out, "entities\t{}", stats.entities);
        let _ = writeln!(out, "triples\t{}", stats.triples);
        let _ = writeln!(out, "relations\t{}", stats.relations);
        for (degree, count) in &stats.degree_histogram {
            let _ = writeln!(out, "degree\t{degree}\t{count}");
        }
    } else {
        if !graph.check_indexes() {
            return Err(Failure::runtime(format!("{}: index check failed", args.path.display())));
        }
        let _ = writeln!(out, "ok: {} entities, {} triples, {} relations", stats.entities, stats.triples, stats.relations);
    }
    Ok(EXIT_OK)
}

fn backend_for(config: &RunConfig, job: Option<&str>) -> Result<Box<dyn Backend>, Failure> {
    match &config.backend {
        BackendConfig::Scripted { script } => {
            let path = match job {
                Some(id) if script.is_dir() => script.join(format!("{id}.jsonl")),
                None if script.is_dir() => {
                    return Err(Failure::usage(format!("{} is a directory; ask needs a script file", script.display())))
                }
                _ => script.clone(),
            };
            Ok(Box::new(load_script(&path).map_err(|e| Failure::runtime(e.to_string()))?))
        }
        BackendConfig::Http(http) => {
            Ok(Box::new(HttpBackend::new(http.clone()).map_err(|e| Failure::runtime(e.to_string()))?))
        }
    }
}

fn pipeline<'a>(config: &RunConfig, graph: &'a KnowledgeGraph, linker: &'a EntityLinker) -> Result<Pipeline<'a>, Failure> {
    Ok(Pipeline::new(graph, linker, config.pipeline.clone())
        .with_prompts(config.prompts()?)
        .with_graph_source(config.graph_path.display().to_string()))
}

fn write_audit(audit: &AuditRecord, path: &Path) -> Result<(), Failure> {
    emit_audit(audit, path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn ask(query: &str, config: &Path, id: &str, overrides: Overrides, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    let config = RunConfig::load(config, &overrides)?;
    let backend = backend_for(&config, None)?;
    let graph = load(&config.graph_path, config.graph_format)?;
    let linker = EntityLinker::new(&graph);
    let result = pipeline(&config, &graph, &linker)?.run(query, backend.as_ref());
    let audit_path = config.audit_dir.as_ref().map(|d| d.join(format!("{id}.json")));
    match result {
        Ok((answer, audit)) => {
            if let Some(p) = &audit_path {
                write_audit(&audit, p)?;
                let _ = writeln!(err, "audit: {}", p.display());
            }
            let _ = writeln!(out, "{}", answer.text);
            Ok(EXIT_OK)
        }
        Err(e) => {
            if let (Some(p), Some(audit)) = (&audit_path, e.audit()) {
                write_audit(audit, p)?;
                let _ = writeln!(err, "audit: {}", p.display());
            }
            Err(Failure::runtime(e.to_string()))
        }
    }
}

#[derive(Debug, Deserialize)]
struct Job {
    id: String,
    query: String,
}

fn read_jobs(input: &Path) -> Result<Vec<Job>, Failure> {
    let text = fs::read_to_string(input).map_err(|e| Failure::usage(format!("{}: {e}", input.display())))?;
    let mut jobs = Vec::new();
    let mut ids = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let job: Job = serde_json::from_str(line)
            .map_err(|e| Failure::usage(format!("{}:{}: {e}", input.display(), n + 1)))?;
        let safe = !job.id.is_empty() && job.id.chars().all(|c| c.is_alphanumeric() || "-_.".contains(c)) && job.id != "." && job.id != "..";
        if !safe {
            return Err(Failure::usage(format!("{}:{}: id {:?} is not a usable file name", input.display(), n + 1, job.id)));
        }
        if !ids.insert(job.id.clone()) {
            return Err(Failure::usage(format!("{}:{}: duplicate id {:?}", input.display(), n + 1, job.id)));
        }
        jobs.push(job);
    }
    Ok(jobs)
}

fn batch(input: &Path, config: &Path, dir: &Path, jobs: usize, overrides: Overrides, out: &mut dyn Write) -> Result<i32, Failure> {
    if jobs == 0 {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    let config = RunConfig::load(config, &overrides)?;
    let work = read_jobs(input)?;
    let graph = load(&config.graph_path, config.graph_format)?;
    let linker = EntityLinker::new(&graph);
    let pipeline = pipeline(&config, &graph, &linker)?;

    let run_one = |job: &Job| -> Result<(), String> {
        let backend = backend_for(&config, Some(&job.id)).map_err(|f| f.message)?;
        let path = dir.join(format!("{}.json", job.id));
        match pipeline.run(&job.query, backend.as_ref()) {
            Ok((_, audit)) => write_audit(&audit, &path).map_err(|f| f.message),
            Err(e) => {
                if let Some(audit) = e.audit() {
                    write_audit(audit, &path).map_err(|f| f.message)?;
                }
                Err(e.to_string())
            }
        }
    };

    let results: Mutex<Vec<Option<Result<(), String>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.min(work.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = work.get(i) else { break };
                let r = run_one(job);
                results.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });

    let mut failed = 0;
    for (job, result) in work.iter().zip(results.into_inner().unwrap_or_else(|p| p.into_inner())) {
        match result.expect("every job runs") {
            Ok(()) => {
                let _ = writeln!(out, "{}\tok", job.id);
            }
            Err(e) => {
                failed += 1;
                let _ = writeln!(out, "{}\tfailed\t{e}", job.id);
            }
        }
    }
    let _ = writeln!(out, "{} of {} jobs succeeded", work.len() - failed, work.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn replay_cmd(audit: &Path, graph: Option<&Path>, out: &mut dyn Write) -> Result<i32, Failure> {
    let record = read_audit(audit).map_err(|e| Failure::usage(format!("{}: {e}", audit.display())))?;
    let graph_path = match (graph, &record.config.graph) {
        (Some(p), _) => p.to_owned(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(Failure::usage("the audit names no graph; pass --graph")),
    };
    let graph = load(&graph_path, GraphFormat::from_path(&graph_path))?;
    let report = replay(&record, &graph).map_err(|e| Failure::runtime(e.to_string()))?;
    if report.matches() {
        let _ = writeln!(out, "MATCH");
        Ok(EXIT_OK)
    } else {
        let show = |a: &Option<String>| a.clone().unwrap_or_else(|| "<none>".into());
        let _ = writeln!(out, "MISMATCH");
        let _ = writeln!(out, "recorded: {}", show(&report.recorded));
        let _ = writeln!(out, "replayed: {}", show(&report.replayed));
        Ok(EXIT_FAILURE)
    }
}
