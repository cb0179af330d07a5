//! Sends one reasoning prompt to an OpenAI-compatible chat endpoint.
//!
//! MIRAGE_ENDPOINT=http://localhost:8000/v1/chat/completions MIRAGE_MODEL=qwen \
//!     cargo run --example http_backend

use mirage::llm::{Backend, CallKey, GenerationRequest, HttpBackend, HttpConfig, Message, SamplingParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (Ok(endpoint), Ok(model)) = (std::env::var("MIRAGE_ENDPOINT"), std::env::var("MIRAGE_MODEL")) else {
        eprintln!("set MIRAGE_ENDPOINT and MIRAGE_MODEL (and optionally MIRAGE_API_KEY)");
        std::process::exit(2);
    };
    let mut config = HttpConfig::new(endpoint, model);
    if std::env::var_os("MIRAGE_API_KEY").is_some() {
        config.api_key_env = Some("MIRAGE_API_KEY".into());
    }
    let backend = HttpBackend::new(config)?;
    let request = GenerationRequest {
        key: CallKey::reasoning(0, 0),
        messages: vec![
            Message::system("Answer briefly."),
            Message::user("Name one common cause of persistent fatigue."),
        ],
        sampling: SamplingParams::REASONING,
        max_tokens: 128,
    };
    println!("{}", serde_json::to_string_pretty(&backend.request_body(&request))?);
    let reply = backend.generate(&request)?;
    println!("\n[{:?}] {}", reply.finish_reason, reply.content);
    Ok(())
}
