//! Runs the treats/causes fixture and shows which sub-answer survives.
//!
//! cargo run --example conflict_resolution

use std::path::Path;

use mirage::config::{BackendConfig, Overrides, RunConfig};
use mirage::coordinator::Pipeline;
use mirage::graph::load_graph;
use mirage::linker::EntityLinker;
use mirage::llm::load_script;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = RunConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/conflict/run.toml"), &Overrides::default())?;
    let BackendConfig::Scripted { script } = &config.backend else { unreachable!("fixture uses a script") };
    let backend = load_script(script)?;
    let graph = load_graph(&config.graph_path, config.graph_format)?;
    let linker = EntityLinker::new(&graph);
    let pipeline = Pipeline::new(&graph, &linker, config.pipeline.clone());

    let (answer, audit) = pipeline.run("Is ibuprofen safe for my headache?", &backend)?;
    for chain in &audit.chains {
        let mark = if chain.suppressed { "suppressed" } else { "kept" };
        println!("q{} [{mark}] {}", chain.sub_question.index, chain.sub_question.text);
    }
    for report in &audit.conflicts {
        println!("\nconflict {:?} under rule {}: {}", report.pair, report.rule, report.description);
        println!("resolved in favour of q{}", report.resolution.unwrap_or(report.pair.0));
    }
    println!("\nfinal: {}", answer.text);
    Ok(())
}
