//! Instruction-data generation: templates from seed examples, filling from
//! labeled records, QA extraction from unlabeled text, dedup and statistics.

mod client;
mod pipeline;
mod template;

#[cfg(feature = "http")]
pub use client::HttpClient;
pub use client::{complete_with_retry, AlignedLlmClient, GenerationParams, LlmRequest, MockClient, Purpose, RetryPolicy};
pub use pipeline::{
    dataset_stats, dedup, extract_qa, generate_templates, is_supported, normalize_text, replace_knowledge_samples,
    run_pipeline, DatasetStats, ExtractOutcome, PipelineInputs, PipelineOutput, Rejected, TaskCatalog,
    TemplateOutcome, SEED_EXAMPLES, SUPPORT_THRESHOLD,
};
pub use template::{fill_templates, parse_qa_wire, FillOutcome, LabeledRecord, Template};
