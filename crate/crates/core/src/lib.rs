pub mod docs;
pub mod eval;
pub mod examples;
pub mod executor;
pub mod llm;
pub mod pipeline;
pub mod registry;
pub mod search;
