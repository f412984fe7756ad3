//! Automatic factuality annotation of LLM answers, knowledge-state probes
//! over activation dumps, factual preference data, and a desk-scale
//! reinforcement-learning-from-knowledge-feedback loop.

pub mod config;
pub mod corpus;
pub mod embedder;
pub mod scorers;
pub mod labeling;
pub mod probes;
pub mod reward;
pub mod rlkf;
pub mod seed;
pub mod synth;
