//! Key-value retrieval for knowledge-intensive questions.
//!
//! A model first answers with a retrieval call naming truncated keys; the
//! index resolves it and the model answers again with the matching record
//! appended below a reference delimiter.

mod call;
mod index;
mod record;
pub mod synth;
mod workflow;

/// Line separating a query from its reference material.
pub const REFERENCE_DELIMITER: &str = "### REFERENCE ###";

pub use call::{detect_retrieval_call, RetrievalCall, CALL_OPEN};
pub use index::{KVIndex, Retrieval, RetrievalHit, DEFAULT_MAX_MATCHES, INDEX_VERSION};
pub use record::{
    is_knowledge_task, read_kb, truncate_key, write_kb, KVRecord, KeyLevel, TaskTag, TruncatedKey, DEFAULT_K, ELLIPSIS,
};
pub use workflow::{
    answer_with_rag, assemble_reference_prompt, parse_reference_prompt, reformat_knowledge_sample,
    LmReader, MissPolicy, Pass, RagAnswer, RagFormats, RagOptions, Reader,
};
