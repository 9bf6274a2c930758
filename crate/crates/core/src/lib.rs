//! Cross-market author representations for forum episodes: text, time and
//! graph-context post encoders, an episode aggregator with per-market heads,
//! training, and retrieval evaluation.

pub mod corpus;
pub mod episode_model;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod text_encoder;
pub mod time_encoder;
pub mod tokenizer;
pub mod trainer;
