//! Security requirement derivation from functional requirements: ASVS
//! ingestion, weighted late-interaction retrieval, LLM-driven synthesis and
//! generation, scope filtering and evaluation metrics.

pub mod corpus;
pub mod datasets;
pub mod generation;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod retriever;
pub mod scope;
pub mod synthesis;
pub mod text;
pub mod weighting;
