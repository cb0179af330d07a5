//! End-to-end run of the fatigue example with an audit written to a temp dir,
//! followed by a replay of that audit.
//!
//! cargo run --example fatigue_pipeline

use std::path::Path;

use mirage::config::{BackendConfig, Overrides, RunConfig};
use mirage::coordinator::{emit_audit, read_audit, replay, Pipeline};
use mirage::graph::load_graph;
use mirage::linker::EntityLinker;
use mirage::llm::load_script;

const QUERY: &str = "Why do I keep feeling fatigued even after sleeping well?";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = RunConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fatigue/run.toml"), &Overrides::default())?;
    let BackendConfig::Scripted { script } = &config.backend else { unreachable!("fixture uses a script") };
    let backend = load_script(script)?;
    let graph = load_graph(&config.graph_path, config.graph_format)?;
    let linker = EntityLinker::new(&graph);
    let pipeline = Pipeline::new(&graph, &linker, config.pipeline.clone())
        .with_graph_source(config.graph_path.display().to_string());

    let (answer, audit) = pipeline.run(QUERY, &backend)?;
    if let Some(d) = &audit.decomposition {
        for q in &d.sub_questions {
            println!("sub-question {}: {}", q.index, q.text);
        }
    }
    for chain in &audit.chains {
        println!("q{}: {} retrievals, {} facts", chain.sub_question.index, chain.retrieval_count, chain.evidence.len());
    }
    println!("\n{}\n\ncited {} facts", answer.text, answer.cited.len());

    let dir = std::env::temp_dir().join("mirage-example");
    let path = dir.join("fatigue.json");
    emit_audit(&audit, &path)?;
    let report = replay(&read_audit(&path)?, &graph)?;
    println!("audit: {} (replay {})", path.display(), if report.matches() { "MATCH" } else { "MISMATCH" });
    Ok(())
}
