//! Links noisy mentions to graph entities at a few thresholds.
//!
//! cargo run --example entity_linking

use std::path::Path;

use mirage::graph::{load_graph, GraphFormat};
use mirage::linker::{EntityLinker, LinkResult, Mention};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fatigue/graph.tsv");
    let graph = load_graph(&path, GraphFormat::Tsv)?;
    let linker = EntityLinker::new(&graph);

    let mentions = ["fatigue", "Iron deficency", "chronic fatigue", "sleep apnoea", "broken leg"];
    println!("{:<18} {:>6} {:>6} {:>6}", "mention", "0.5", "0.7", "0.9");
    for text in mentions {
        let mention = Mention::new(text)?;
        let mut row = format!("{text:<18}");
        for tau in [0.5, 0.7, 0.9] {
            let cell = match linker.link(&mention, tau)? {
                LinkResult::Matched { score, .. } => format!("{score:.3}"),
                LinkResult::NoMatch => "-".to_owned(),
            };
            row.push_str(&format!(" {cell:>6}"));
        }
        let best = linker.link(&mention, 0.01)?;
        println!("{row}  -> {}", best.entity().map_or("<none>", |e| e.as_str()));
    }
    Ok(())
}
