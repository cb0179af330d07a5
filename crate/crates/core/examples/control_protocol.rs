//! Renders and parses the control-token protocol.
//!
//! cargo run --example control_protocol

use mirage::protocol::{
    detect_termination, extract_search_block, final_answer_text, render_result_block, render_search_block,
    ControlSignal, ResultPayload,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let block = render_search_block(&["iron deficiency", "fatigue"])?;
    let generation = format!("Low iron could explain this. {block}");
    println!("generation: {generation}");

    let parsed = extract_search_block(&generation)?.expect("block present");
    let mentions: Vec<&str> = parsed.mentions.iter().map(|m| m.as_str()).collect();
    println!("mentions:   {mentions:?} (bridge: {})", parsed.is_bridge());

    let facts = ResultPayload::Facts(vec!["Iron Deficiency causes Anemia".into(), "Anemia causes Fatigue".into()]);
    println!("\n{}", render_result_block(&facts));
    println!("{}", render_result_block(&ResultPayload::Signal(ControlSignal::NoEntityMatch)));

    for bad in ["<|KG_QUERY_BEGIN|>a|b|c<|KG_QUERY_END|>", "<|KG_QUERY_BEGIN|>never closed"] {
        println!("\n{bad:?}\n  -> {}", extract_search_block(bad).unwrap_err());
    }

    let done = "<|FINAL_ANSWER|> Probably anemia.";
    println!("\nterminates: {} answer: {:?}", detect_termination(done), final_answer_text(done));
    Ok(())
}
