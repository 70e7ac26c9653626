//! Paired-seed experiments on the synthetic tasks: forgetting under full
//! fine-tuning versus RAT, and the group-count ablation.

use serde::{Deserialize, Serialize};

use crate::curriculum::stage::{run_stage, Corpus, Method, RunReport, StageConfig};
use crate::curriculum::synth;
use crate::error::{Error, Result};
use crate::eval::{emit_report, EvalOptions, EvalTask, Layout, Metric, MetricResult, Report, ReportEntry};
use crate::lm::{ModelConfig, TinyLm, Tokenizer, TrainConfig, Trainable};
use crate::nn::AdamWConfig;
use crate::sample::InstructionSample;

/// Sizes and schedules for the two-task forgetting experiment.
///
/// A base model is pre-trained once on a plain-text corpus. Per seed it is
/// then trained on task A (cipher translation) and finally on task B
/// (punctuation) twice from the same starting point: once with every
/// parameter trainable and once with RAT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingProtocol {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub batch_size: usize,
    pub pretrain_lines: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub task_a_size: usize,
    pub task_a_steps: usize,
    pub task_a_lr: f64,
    pub task_b_size: usize,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub eval_size: usize,
    pub n_groups: usize,
    pub calibration_size: usize,
    pub base_seed: u64,
}

impl Default for ForgettingProtocol {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 32,
            n_heads: 4,
            max_seq_len: 64,
            batch_size: 8,
            pretrain_lines: 1024,
            pretrain_steps: 800,
            pretrain_lr: 3e-3,
            task_a_size: 256,
            task_a_steps: 250,
            task_a_lr: 3e-3,
            task_b_size: 128,
            stage2_steps: 200,
            stage2_lr: 3e-3,
            eval_size: 64,
            n_groups: 8,
            calibration_size: 16,
            base_seed: 5,
        }
    }
}

pub const TASK_A: &str = synth::TRANSLATION;
pub const TASK_B: &str = synth::PUNCTUATION;

/// Held-out evaluation sets; fixed across seeds.
pub fn protocol_eval_sets(eval_size: usize) -> Vec<(EvalTask, Vec<InstructionSample>)> {
    let task = |name: &str| EvalTask {
        task: name.to_string(),
        path: format!("memory:{name}-eval").into(),
        metric: Metric::Ppl,
        knowledge_intensive: false,
    };
    vec![
        (task(TASK_A), synth::translation_samples(eval_size, 99)),
        (task(TASK_B), synth::punctuation_samples(eval_size, 98)),
    ]
}

/// Per-seed perplexities on the held-out sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Task-A PPL after stage A, i.e. before stage 2.
    pub a_before: f64,
    pub a_after_full: f64,
    pub a_after_rat: f64,
    pub b_after_full: f64,
    pub b_after_rat: f64,
    pub rat_selected: Vec<usize>,
}

impl SeedOutcome {
    pub fn full_degradation(&self) -> f64 {
        self.a_after_full - self.a_before
    }

    pub fn rat_degradation(&self) -> f64 {
        self.a_after_rat - self.a_before
    }

    /// RAT's final task-B PPL relative to full fine-tuning's.
    pub fn b_ratio(&self) -> f64 {
        self.b_after_rat / self.b_after_full
    }
}

fn ppl_of(results: &[MetricResult], task: &str) -> Result<f64> {
    results
        .iter()
        .find(|r| r.task == task)
        .map(|r| r.value)
        .ok_or_else(|| Error::data(format!("no result for {task}")))
}

impl ForgettingProtocol {
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::from_chars(synth::alphabet().chars().collect())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            vocab_size,
            max_seq_len: self.max_seq_len,
        }
    }

    fn train_config(&self, steps: usize, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                lr,
                ..AdamWConfig::default()
            },
            warmup_ratio: 0.0,
            seed,
        }
    }

    /// Base model shared by every seed: plain-text pre-training only.
    pub fn pretrain_base(&self) -> Result<TinyLm> {
        let tok = self.tokenizer();
        let mut model = TinyLm::new(self.model_config(tok.vocab_size()), tok.clone(), self.base_seed)?;
        let corpus = self.pretrain_corpus(&tok);
        model.train(
            &corpus.items,
            &Trainable::All,
            &self.train_config(self.pretrain_steps, self.pretrain_lr, self.base_seed),
        )?;
        Ok(model)
    }

    pub fn pretrain_corpus(&self, tok: &Tokenizer) -> Corpus {
        Corpus::from_documents(
            "synthetic-pretrain",
            &synth::pretrain_lines(self.pretrain_lines, self.base_seed),
            tok,
        )
    }

    fn stage(&self, id: u8, method: Method, steps: usize, lr: f64, seed: u64) -> StageConfig {
        StageConfig {
            calibration_size: self.calibration_size,
            n_groups: self.n_groups,
            method,
            steps,
            batch_size: self.batch_size,
            lr,
            seed,
            ..StageConfig::new(id, format!("memory:stage{id}"), "memory:calibration")
        }
    }

    /// Task A with full fine-tuning, then task B under both methods.
    /// Returns the outcome plus the two stage-2 reports (full, RAT).
    pub fn run_seed(&self, base: &TinyLm, seed: u64) -> Result<(SeedOutcome, RunReport, RunReport)> {
        let tok = base.tokenizer.clone();
        let eval = protocol_eval_sets(self.eval_size);
        let opts = EvalOptions::default();
        let task_a = Corpus::from_samples(
            format!("{TASK_A}-train-{seed}"),
            &synth::translation_samples(self.task_a_size, 1000 + seed),
            &tok,
        );
        let task_b = Corpus::from_samples(
            format!("{TASK_B}-train-{seed}"),
            &synth::punctuation_samples(self.task_b_size, 2000 + seed),
            &tok,
        );

        let mut after_a = base.clone();
        let stage_a = self.stage(1, Method::Full, self.task_a_steps, self.task_a_lr, seed);
        run_stage(&mut after_a, &stage_a, &task_a, &self.pretrain_corpus(&tok), &[], &opts)?;

        let run = |method| -> Result<RunReport> {
            let mut m = after_a.clone();
            let cfg = self.stage(2, method, self.stage2_steps, self.stage2_lr, seed);
            let report = run_stage(&mut m, &cfg, &task_b, &task_a, &eval, &opts)?;
            if let Some(e) = &report.eval_error {
                return Err(Error::data(e.clone()));
            }
            Ok(report)
        };
        let full = run(Method::Full)?;
        let rat = run(Method::Rat)?;
        let outcome = SeedOutcome {
            seed,
            a_before: ppl_of(&full.eval_before, TASK_A)?,
            a_after_full: ppl_of(&full.eval_after, TASK_A)?,
            a_after_rat: ppl_of(&rat.eval_after, TASK_A)?,
            b_after_full: ppl_of(&full.eval_after, TASK_B)?,
            b_after_rat: ppl_of(&rat.eval_after, TASK_B)?,
            rat_selected: rat.plan.as_ref().map(|p| p.selected().to_vec()).unwrap_or_default(),
        };
        Ok((outcome, full, rat))
    }

    pub fn run(&self, seeds: &[u64]) -> Result<ProtocolOutcome> {
        let base = self.pretrain_base()?;
        let mut outcomes = Vec::with_capacity(seeds.len());
        for &s in seeds {
            outcomes.push(self.run_seed(&base, s)?.0);
        }
        Ok(ProtocolOutcome { seeds: outcomes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub seeds: Vec<SeedOutcome>,
}

impl ProtocolOutcome {
    /// Seeds on which RAT degraded task A no more than full fine-tuning.
    pub fn rat_forgets_less(&self) -> usize {
        self.seeds
            .iter()
            .filter(|s| s.rat_degradation() <= s.full_degradation())
            .count()
    }

    /// Worst RAT/full ratio of final task-B PPL.
    pub fn worst_b_ratio(&self) -> f64 {
        self.seeds.iter().map(SeedOutcome::b_ratio).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Seed-averaged PPLs as FT/RAT rows.
    pub fn table(&self) -> Result<Report> {
        if self.seeds.is_empty() {
            return Err(Error::data("no seeds were run"));
        }
        let n = self.seeds.len() as f64;
        let mean = |f: fn(&SeedOutcome) -> f64| self.seeds.iter().map(f).sum::<f64>() / n;
        let count = self.seeds.len();
        let entries = vec![
            ReportEntry::new("FT", MetricResult::new(TASK_A, Metric::Ppl, mean(|s| s.a_after_full), count)?),
            ReportEntry::new("FT", MetricResult::new(TASK_B, Metric::Ppl, mean(|s| s.b_after_full), count)?),
            ReportEntry::new("RAT", MetricResult::new(TASK_A, Metric::Ppl, mean(|s| s.a_after_rat), count)?),
            ReportEntry::new("RAT", MetricResult::new(TASK_B, Metric::Ppl, mean(|s| s.b_after_rat), count)?),
        ];
        emit_report(&entries, Layout::Table5)
    }
}

/// One RAT stage per group count, all from the same starting model.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub reports: Vec<RunReport>,
    pub entries: Vec<ReportEntry>,
    pub table: Report,
}

pub fn n_ablation(
    base: &TinyLm,
    stage: &StageConfig,
    ns: &[usize],
    train: &Corpus,
    calibration_source: &Corpus,
    eval: &[(EvalTask, Vec<InstructionSample>)],
    opts: &EvalOptions,
) -> Result<AblationOutcome> {
    if ns.is_empty() {
        return Err(Error::config("ablation.n", "no group counts given"));
    }
    let mut reports = Vec::new();
    let mut entries = Vec::new();
    for &n in ns {
        let mut m = base.clone();
        let cfg = StageConfig {
            n_groups: n,
            method: Method::Rat,
            ..stage.clone()
        };
        let report = run_stage(&mut m, &cfg, train, calibration_source, eval, opts)?;
        if let Some(e) = &report.eval_error {
            return Err(Error::data(format!("N={n}: {e}")));
        }
        entries.extend(report.eval_after.iter().map(|r| ReportEntry::new(n.to_string(), r.clone())));
        reports.push(report);
    }
    let table = emit_report(&entries, Layout::Table6)?;
    Ok(AblationOutcome {
        reports,
        entries,
        table,
    })
}
