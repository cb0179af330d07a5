//! Runs one reasoning chain against a scripted model and prints each turn.
//!
//! cargo run --example scripted_reasoning_chain

use std::path::Path;

use mirage::decompose::SubQuestion;
use mirage::graph::{load_graph, GraphFormat};
use mirage::linker::EntityLinker;
use mirage::llm::load_script;
use mirage::prompts::PromptSet;
use mirage::retriever::{ChainRunner, TurnAction};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fatigue");
    let graph = load_graph(dir.join("graph.tsv"), GraphFormat::Tsv)?;
    let backend = load_script(dir.join("script.jsonl"))?;
    let linker = EntityLinker::new(&graph);
    let prompts = PromptSet::default();
    let runner = ChainRunner::new(&graph, &linker, &prompts);

    let question = SubQuestion { index: 0, text: "What conditions commonly cause fatigue?".into(), seed_entities: vec![] };
    let chain = runner.run(&question, &backend);
    for turn in &chain.turns {
        let action = match &turn.action {
            TurnAction::Searched { block } => format!("search {:?}", block.raw),
            TurnAction::Control { signal } => format!("control {}", signal.token()),
            TurnAction::Malformed { reason } => format!("malformed ({reason})"),
            TurnAction::Terminated => "terminated".to_owned(),
        };
        println!("turn {}: {action}", turn.turn_index + 1);
        if let Some(result) = &turn.injected_result {
            for line in result.lines() {
                println!("    {line}");
            }
        }
    }
    println!("\nretrievals: {}, evidence facts: {}", chain.retrieval_count, chain.evidence.len());
    println!("answer: {}", chain.answer.as_deref().unwrap_or("<none>"));
    Ok(())
}
