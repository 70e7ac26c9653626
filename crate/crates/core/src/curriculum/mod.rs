//! Two-stage fine-tuning with a RAT plan recomputed for every stage.

mod protocol;
mod stage;
pub mod synth;
mod two_stage;

pub use protocol::{
    n_ablation, protocol_eval_sets, AblationOutcome, ForgettingProtocol, ProtocolOutcome, SeedOutcome, TASK_A, TASK_B,
};
pub use stage::{
    build_calibration, run_stage, sample_indices, Corpus, Method, RunReport, StageConfig, STAGE_KEYS,
};
pub use two_stage::{
    run_two_stage, validate_calibration_provenance, ForgettingEntry, ForgettingSummary, TwoStageConfig,
    TwoStageOutcome,
};
