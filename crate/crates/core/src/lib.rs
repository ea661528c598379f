//! LLM-driven SQL query rewriting.
//!
//! A query is rewritten by an ensemble of prompts (basic prompts and
//! one-rule prompts enriched with schema and selectivity context), each
//! candidate gated by the engine's parser, its cost estimate and a sampled
//! equivalence check. The best prompt then seeds a Monte-Carlo tree search
//! over the model's next-token probabilities.

pub mod bench;
pub mod classifier;
pub mod clock;
pub mod config;
pub mod db;
pub mod equiv;
pub mod events;
pub mod exec;
pub mod llm;
pub mod mcts;
pub mod pipeline;
pub mod prompts;
pub mod sql;
