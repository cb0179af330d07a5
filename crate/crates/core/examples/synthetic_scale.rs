//! Builds a synthetic graph at a chosen scale and times graph lookups.
//!
//! cargo run --release --example synthetic_scale -- [small|large]

use std::time::{Duration, Instant};

use mirage::synthetic::{generate_graph, SyntheticSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = match std::env::args().nth(1).as_deref() {
        Some("large") => SyntheticSpec::CMCKG,
        _ => SyntheticSpec::EMCKG,
    };
    let t = Instant::now();
    let graph = generate_graph(spec)?;
    println!(
        "{} entities, {} triples, {} relations built in {:.2?}",
        graph.entity_count(),
        graph.triple_count(),
        graph.relation_count(),
        t.elapsed()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<&str> = graph.entities().iter().map(|e| e.as_str()).collect();
    let (mut anchor, mut bridge, mut connected) = (Vec::new(), Vec::new(), 0);
    for _ in 0..1000 {
        let t = Instant::now();
        graph.neighbors(ids.choose(&mut rng).unwrap(), 10)?;
        anchor.push(t.elapsed());
        let pair: Vec<&&str> = ids.choose_multiple(&mut rng, 2).collect();
        let t = Instant::now();
        connected += usize::from(!graph.find_chains(pair[0], pair[1], 3, 5)?.is_empty());
        bridge.push(t.elapsed());
    }
    println!("anchor median {:.2?}", median(anchor));
    println!("bridge median {:.2?} ({connected}/1000 pairs connected within 3 hops)", median(bridge));
    Ok(())
}
