//! Multi-chain question answering over a knowledge graph.

pub mod cli;
pub mod config;
pub mod coordinator;
pub mod decompose;
pub mod evidence;
pub mod graph;
pub mod linker;
pub mod llm;
pub mod prompts;
pub mod protocol;
pub mod retriever;
pub mod synth;
pub mod synthetic;
