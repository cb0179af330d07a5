//! Loads the toy fatigue graph and runs anchor and bridge lookups.
//!
//! cargo run --example graph_queries

use std::path::Path;

use mirage::evidence::verbalize;
use mirage::graph::{load_graph, GraphFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fatigue/graph.tsv");
    let graph = load_graph(&path, GraphFormat::Tsv)?;
    let stats = graph.stats();
    println!("{} entities, {} triples, {} relations", stats.entities, stats.triples, stats.relations);

    println!("\nanchor: Fatigue (k = 3 per relation)");
    for t in graph.neighbors("Fatigue", 3)? {
        println!("  {}", verbalize(&t));
    }

    println!("\nbridge: Chronic Fatigue Syndrome -> Sleep Recovery (h = 3, n = 5)");
    for chain in graph.find_chains("Chronic Fatigue Syndrome", "Sleep Recovery", 3, 5)? {
        let facts: Vec<String> = chain.steps().iter().map(verbalize).collect();
        println!("  [{} hop] {}", chain.len(), facts.join("; "));
    }
    Ok(())
}
