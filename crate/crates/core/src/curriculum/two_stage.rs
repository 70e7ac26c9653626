use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::FlatConfig;
use crate::curriculum::stage::{run_stage, Corpus, RunReport, StageConfig, STAGE_KEYS};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, forgetting_delta, EvalOptions, EvalTask, Metric, MetricResult};
use crate::lm::TinyLm;
use crate::sample::InstructionSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingEntry {
    pub task: String,
    pub metric: Metric,
    pub before: f64,
    pub after: f64,
    /// Positive means the task got worse.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSummary {
    pub entries: Vec<ForgettingEntry>,
}

impl ForgettingSummary {
    /// Pairs results by task; `tasks` restricts the summary when non-empty.
    pub fn from_results(before: &[MetricResult], after: &[MetricResult], tasks: &[String]) -> Result<Self> {
        let mut entries = Vec::new();
        for b in before {
            if !tasks.is_empty() && !tasks.contains(&b.task) {
                continue;
            }
            let a = after
                .iter()
                .find(|a| a.task == b.task)
                .ok_or_else(|| Error::data(format!("no post-stage result for task {}", b.task)))?;
            entries.push(ForgettingEntry {
                task: b.task.clone(),
                metric: b.metric,
                before: b.value,
                after: a.value,
                delta: forgetting_delta(b, a)?,
            });
        }
        if let Some(t) = tasks.iter().find(|t| !entries.iter().any(|e| &e.task == *t)) {
            return Err(Error::data(format!("forgetting task {t} was not evaluated")));
        }
        Ok(Self { entries })
    }

    /// Recomputes the summary from two models on the same evaluation data.
    pub fn from_models(
        before: &TinyLm,
        after: &TinyLm,
        eval: &[(EvalTask, Vec<InstructionSample>)],
        opts: &EvalOptions,
    ) -> Result<Self> {
        let b = evaluate_all(before, eval, opts)?;
        let a = evaluate_all(after, eval, opts)?;
        Self::from_results(&b, &a, &[])
    }

    pub fn delta(&self, task: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.task == task).map(|e| e.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Tasks whose forgetting is summarised; empty means every evaluated task.
    pub forgetting_tasks: Vec<String>,
}

impl TwoStageConfig {
    pub fn from_flat(cfg: &FlatConfig, base: &Path) -> Result<Self> {
        let tasks = cfg
            .get_str("forgetting.tasks")
            .map(|v| v.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect())
            .unwrap_or_default();
        Ok(Self {
            stage1: StageConfig::from_flat(cfg, 1, base)?,
            stage2: StageConfig::from_flat(cfg, 2, base)?,
            forgetting_tasks: tasks,
        })
    }

    /// Keys this config reads, for `FlatConfig::ensure_known`.
    pub fn known_keys() -> Vec<String> {
        let mut keys: Vec<String> = STAGE_KEYS
            .iter()
            .flat_map(|k| [format!("stage1.{k}"), format!("stage2.{k}")])
            .collect();
        keys.push("forgetting.tasks".into());
        keys
    }
}

/// Stage-2 calibration must come from what stage 1 trained on, and never
/// from stage 2's own data. Compared by content digest, not by path.
pub fn validate_calibration_provenance(stage1_train: &Corpus, stage2_calibration: &Corpus, stage2_train: &Corpus) -> Result<()> {
    if stage2_calibration.digest == stage2_train.digest {
        return Err(Error::config(
            "stage2.calibration_source",
            "stage-2 calibration data must not be the stage-2 training set",
        ));
    }
    if stage2_calibration.digest != stage1_train.digest {
        return Err(Error::config(
            "stage2.calibration_source",
            format!(
                "must be drawn from the stage-1 training data ({}), got {}",
                stage1_train.source_tag(),
                stage2_calibration.source_tag()
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageOutcome {
    pub stage1: RunReport,
    pub stage2: RunReport,
    pub forgetting: ForgettingSummary,
    /// Checkpoint written after stage 1, when a directory was given.
    pub stage1_checkpoint: Option<PathBuf>,
}

/// Runs stage 1 then stage 2 from its output.
///
/// Stage-1 data and calibration are loaded first; stage-2 data only after
/// stage 1 finished and (with `checkpoint_dir`) its checkpoint was written,
/// so a broken stage-2 input leaves the stage-1 model on disk.
pub fn run_two_stage(
    model: &mut TinyLm,
    cfg: &TwoStageConfig,
    eval: &[(EvalTask, Vec<InstructionSample>)],
    eval_opts: &EvalOptions,
    checkpoint_dir: Option<&Path>,
) -> Result<TwoStageOutcome> {
    cfg.stage1.validate(Some(model.config.n_layers))?;
    cfg.stage2.validate(Some(model.config.n_layers))?;
    if cfg.stage1.stage_id != 1 || cfg.stage2.stage_id != 2 {
        return Err(Error::config("stage_id", "stages must be numbered 1 then 2"));
    }
    let tok = model.tokenizer.clone();
    let train1 = Corpus::load(&cfg.stage1.train_dataset, &tok)?;
    let calib1 = Corpus::load(&cfg.stage1.calibration_source, &tok)?;
    let stage1 = run_stage(model, &cfg.stage1, &train1, &calib1, eval, eval_opts)?;

    let stage1_checkpoint = match checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("stage1.ckpt");
            model.save(&path, serde_json::json!({ "stage": 1 }))?;
            Some(path)
        }
        None => None,
    };

    let train2 = Corpus::load(&cfg.stage2.train_dataset, &tok)?;
    let calib2 = Corpus::load(&cfg.stage2.calibration_source, &tok)?;
    validate_calibration_provenance(&train1, &calib2, &train2)?;
    let stage2 = run_stage(model, &cfg.stage2, &train2, &calib2, eval, eval_opts)?;
    if let Some(e) = &stage2.eval_error {
        return Err(Error::data(format!("stage-2 evaluation failed: {e}")));
    }
    let forgetting = ForgettingSummary::from_results(&stage2.eval_before, &stage2.eval_after, &cfg.forgetting_tasks)?;
    Ok(TwoStageOutcome {
        stage1,
        stage2,
        forgetting,
        stage1_checkpoint,
    })
}
