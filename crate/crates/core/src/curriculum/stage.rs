use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::FlatConfig;
use crate::digest::{sha256_hex, sha256_parts};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate_all, EvalOptions, EvalTask, Layout, MetricResult, ReportEntry};
use crate::lm::{Tokenizer, TinyLm, TrainConfig, Trainable};
use crate::nn::AdamWConfig;
use crate::rat::{apply_plan, plan_from_calibration, CalibrationSet, RedundancyProfile, TuningPlan};
use crate::sample::{read_jsonl, read_lines, InstructionSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Redundancy-aware tuning: one layer per depth group.
    Rat,
    /// Every parameter trainable.
    Full,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Rat => "RAT",
            Method::Full => "FT",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rat" => Ok(Method::Rat),
            "full" | "all" => Ok(Method::Full),
            _ => Err(format!("unknown method {s:?} (expected rat or full)")),
        }
    }
}

/// Encoded sequences plus a provenance tag and a content digest.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tag: String,
    pub digest: String,
    pub items: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn from_sequences(tag: impl Into<String>, items: Vec<Vec<usize>>) -> Self {
        let digest = sha256_parts(
            items
                .iter()
                .map(|s| s.iter().flat_map(|t| (*t as u64).to_le_bytes()).collect::<Vec<u8>>()),
        );
        Self {
            tag: tag.into(),
            digest,
            items,
        }
    }

    pub fn from_samples(tag: impl Into<String>, samples: &[InstructionSample], tok: &Tokenizer) -> Self {
        Self::from_sequences(
            tag,
            samples
                .iter()
                .map(|s| tok.encode_instruction(&s.query, &s.response))
                .collect(),
        )
    }

    pub fn from_documents(tag: impl Into<String>, lines: &[String], tok: &Tokenizer) -> Self {
        Self::from_sequences(tag, lines.iter().map(|l| tok.encode_document(l)).collect())
    }

    /// `.jsonl` files hold instruction samples; anything else is read as one
    /// document per non-empty line.
    pub fn load(path: &Path, tok: &Tokenizer) -> Result<Self> {
        let tag = path.display().to_string();
        let corpus = if path.extension().is_some_and(|e| e == "jsonl") {
            Self::from_samples(tag, &read_jsonl::<InstructionSample>(path)?, tok)
        } else {
            Self::from_documents(tag, &read_lines(path)?, tok)
        };
        if corpus.items.is_empty() {
            return Err(Error::data(format!("{} is empty", path.display())));
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `tag#<first 16 hex digits of the digest>`
    pub fn source_tag(&self) -> String {
        format!("{}#{}", self.tag, &self.digest[..16])
    }
}

/// Settings for one curriculum stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_id: u8,
    pub train_dataset: PathBuf,
    pub calibration_source: PathBuf,
    pub calibration_size: usize,
    pub n_groups: usize,
    pub method: Method,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

pub const STAGE_KEYS: &[&str] = &[
    "train_dataset",
    "calibration_source",
    "calibration_size",
    "n_groups",
    "method",
    "steps",
    "batch_size",
    "lr",
    "warmup_ratio",
    "weight_decay",
    "beta1",
    "beta2",
    "seed",
];

impl StageConfig {
    /// Defaults: N = 8, AdamW(0.9, 0.999), no weight decay, no warmup.
    pub fn new(stage_id: u8, train_dataset: impl Into<PathBuf>, calibration_source: impl Into<PathBuf>) -> Self {
        Self {
            stage_id,
            train_dataset: train_dataset.into(),
            calibration_source: calibration_source.into(),
            calibration_size: 16,
            n_groups: 8,
            method: Method::Rat,
            steps: 100,
            batch_size: 8,
            lr: 1e-3,
            warmup_ratio: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }

    /// Reads `stage<id>.*` keys; relative paths resolve against `base`.
    pub fn from_flat(cfg: &FlatConfig, stage_id: u8, base: &Path) -> Result<Self> {
        let prefix = format!("stage{stage_id}");
        let s = cfg.scoped(&prefix);
        let key = |k: &str| format!("{prefix}.{k}");
        let rekey = |e: Error| match e {
            Error::Config { key: k, message } => Error::config(key(&k), message),
            e => e,
        };
        s.ensure_known(STAGE_KEYS).map_err(rekey)?;
        let path = |k: &str| -> Result<PathBuf> {
            let p = PathBuf::from(s.require_str(k).map_err(rekey)?);
            Ok(if p.is_absolute() { p } else { base.join(p) })
        };
        let d = Self::new(stage_id, path("train_dataset")?, path("calibration_source")?);
        let out = Self {
            calibration_size: s.get_or("calibration_size", d.calibration_size).map_err(rekey)?,
            n_groups: s.get_or("n_groups", d.n_groups).map_err(rekey)?,
            method: s.get_or("method", d.method).map_err(rekey)?,
            steps: s.get_or("steps", d.steps).map_err(rekey)?,
            batch_size: s.get_or("batch_size", d.batch_size).map_err(rekey)?,
            lr: s.get_or("lr", d.lr).map_err(rekey)?,
            warmup_ratio: s.get_or("warmup_ratio", d.warmup_ratio).map_err(rekey)?,
            weight_decay: s.get_or("weight_decay", d.weight_decay).map_err(rekey)?,
            beta1: s.get_or("beta1", d.beta1).map_err(rekey)?,
            beta2: s.get_or("beta2", d.beta2).map_err(rekey)?,
            seed: s.get_or("seed", d.seed).map_err(rekey)?,
            ..d
        };
        out.validate(None).map_err(rekey)?;
        Ok(out)
    }

    /// Checks value ranges, and `N` against the model when one is given.
    /// Error keys are relative to the stage scope.
    pub fn validate(&self, n_layers: Option<usize>) -> Result<()> {
        if !matches!(self.stage_id, 1 | 2) {
            return Err(Error::config("stage_id", "must be 1 or 2"));
        }
        if self.calibration_size == 0 {
            return Err(Error::config("calibration_size", "must be at least 1"));
        }
        if self.n_groups == 0 {
            return Err(Error::config("n_groups", "must be at least 1"));
        }
        if let Some(n) = n_layers {
            if self.n_groups > n {
                return Err(Error::config(
                    "n_groups",
                    format!("{} groups exceed the model's {n} layers", self.n_groups),
                ));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("warmup_ratio", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            warmup_ratio: self.warmup_ratio,
            seed: self.seed,
        }
    }
}

/// `k` distinct indices from `0..n`, uniformly at random, returned in
/// ascending order.
///
/// Runs the first `k` swaps of a Fisher–Yates shuffle, tracking only the
/// displaced slots, so memory is O(k) regardless of `n`.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::range(format!("cannot draw {k} items from a source of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut displaced = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let j = rng.gen_range(i..n);
        let vj = *displaced.get(&j).unwrap_or(&j);
        let vi = *displaced.get(&i).unwrap_or(&i);
        displaced.insert(j, vi);
        out.push(vj);
    }
    out.sort_unstable();
    Ok(out)
}

/// Uniform sample without replacement from `source`, in source order.
pub fn build_calibration(source: &Corpus, size: usize, seed: u64) -> Result<CalibrationSet> {
    if source.is_empty() {
        return Err(Error::data(format!("calibration source {} is empty", source.tag)));
    }
    if size == 0 {
        return Err(Error::config("calibration_size", "must be at least 1"));
    }
    if size > source.len() {
        return Err(Error::config(
            "calibration_size",
            format!("{size} exceeds the {} items in {}", source.len(), source.tag),
        ));
    }
    let picked = sample_indices(source.len(), size, seed)?
        .into_iter()
        .map(|i| source.items[i].clone())
        .collect();
    CalibrationSet::new(picked, source.source_tag(), seed)
}

/// Everything a stage produced, minus the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage_id: u8,
    pub method: Method,
    pub n_groups: usize,
    pub calibration_tag: String,
    pub calibration_size: usize,
    pub calibration_seed: u64,
    pub train_tag: String,
    pub profile: RedundancyProfile,
    /// The installed plan; `None` for full fine-tuning.
    pub plan: Option<TuningPlan>,
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub eval_before: Vec<MetricResult>,
    pub eval_after: Vec<MetricResult>,
    /// Set when post-training evaluation failed; the trained model is kept.
    pub eval_error: Option<String>,
    pub params_before: String,
    pub params_after: String,
    /// Not serialised, so report files stay hash-stable across runs.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_json())
    }

    /// Plan table followed by before/after metrics in method-row layout.
    pub fn to_markdown(&self) -> Result<String> {
        let mut s = format!(
            "# Stage {} ({})\n\ncalibration: {} ({} samples, seed {})\ntraining: {} ({} steps)\n\n",
            self.stage_id,
            self.method.label(),
            self.calibration_tag,
            self.calibration_size,
            self.calibration_seed,
            self.train_tag,
            self.steps
        );
        match &self.plan {
            Some(plan) => {
                let _ = writeln!(s, "## Plan (N = {})\n", plan.n_groups());
                s.push_str("| layer | score | group | selected |\n|---:|---:|---:|---|\n");
                for line in plan.to_csv().lines().skip(1) {
                    let f: Vec<&str> = line.split(',').collect();
                    let _ = writeln!(s, "| {} | {} | {} | {} |", f[0], f[1], f[2], f[3]);
                }
            }
            None => s.push_str("## Plan\n\nall parameters trainable\n"),
        }
        if !self.eval_after.is_empty() {
            let mut entries: Vec<ReportEntry> = self
                .eval_before
                .iter()
                .map(|r| ReportEntry::new("before", r.clone()))
                .collect();
            entries.extend(
                self.eval_after
                    .iter()
                    .map(|r| ReportEntry::new(self.method.label(), r.clone())),
            );
            s.push_str("\n## Evaluation\n\n");
            s.push_str(&emit_report(&entries, Layout::Table5)?.markdown);
        }
        if let Some(e) = &self.eval_error {
            let _ = writeln!(s, "\nevaluation failed: {e}");
        }
        Ok(s)
    }
}

/// One stage: calibration → profile → groups → selection → freeze → train,
/// with evaluation before and after.
///
/// Failure of the final evaluation is recorded in the report rather than
/// returned, because the model has already been trained in place.
pub fn run_stage(
    model: &mut TinyLm,
    stage: &StageConfig,
    train: &Corpus,
    calibration_source: &Corpus,
    eval: &[(EvalTask, Vec<InstructionSample>)],
    eval_opts: &EvalOptions,
) -> Result<RunReport> {
    let started = Instant::now();
    stage.validate(Some(model.config.n_layers))?;
    if train.is_empty() {
        return Err(Error::data(format!("training set {} is empty", train.tag)));
    }
    let calib = build_calibration(calibration_source, stage.calibration_size, stage.seed)?;
    let (profile, plan) = plan_from_calibration(model, &calib, stage.n_groups)?;
    let eval_before = evaluate_all(model, eval, eval_opts)?;
    let params_before = model.params.content_hash();

    let (plan, scope) = match stage.method {
        Method::Rat => {
            apply_plan(model, &plan)?;
            (Some(plan), Trainable::Installed)
        }
        Method::Full => (None, Trainable::All),
    };
    let report = model.train(&train.items, &scope, &stage.train_config())?;
    model.params.unfreeze_all();

    let (eval_after, eval_error) = match evaluate_all(model, eval, eval_opts) {
        Ok(r) => (r, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    Ok(RunReport {
        stage_id: stage.stage_id,
        method: stage.method,
        n_groups: stage.n_groups,
        calibration_tag: calib.source_tag.clone(),
        calibration_size: calib.len(),
        calibration_seed: calib.seed,
        train_tag: train.source_tag(),
        profile,
        plan,
        steps: report.steps,
        loss_curve: report.loss_curve,
        eval_before,
        eval_after,
        eval_error,
        params_before,
        params_after: model.params.content_hash(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}
