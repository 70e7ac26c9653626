use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{parse_bool, FlatConfig};
use crate::error::{Error, Result};
use crate::eval::metrics::{bleu, char_f1, exact_accuracy, sample_nll, Metric, MetricResult, PplScope};
use crate::lm::TinyLm;
use crate::sample::{read_jsonl, InstructionSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub task: String,
    pub path: PathBuf,
    pub metric: Metric,
    pub knowledge_intensive: bool,
}

/// Tasks to evaluate, read from flat text:
///
/// ```text
/// task.cipher.path = data/cipher_test.jsonl
/// task.cipher.metric = ppl
/// task.cipher.knowledge = false
/// max_new_tokens = 48
/// ppl_scope = full
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub tasks: Vec<EvalTask>,
    pub options: EvalOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_new_tokens: usize,
    pub ppl_scope: PplScope,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            ppl_scope: PplScope::Full,
        }
    }
}

impl EvalManifest {
    /// Relative dataset paths resolve against `base`.
    pub fn from_config(cfg: &FlatConfig, base: &Path) -> Result<Self> {
        cfg.ensure_known(&["task.*", "max_new_tokens", "ppl_scope"])?;
        let tasks_cfg = cfg.scoped("task");
        let names: BTreeSet<&str> = tasks_cfg
            .keys()
            .filter_map(|k| k.rsplit_once('.').map(|(name, _)| name))
            .collect();
        if names.is_empty() {
            return Err(Error::config("task", "manifest lists no tasks"));
        }
        let mut tasks = Vec::new();
        for name in names {
            let t = tasks_cfg.scoped(name);
            let full = |k: &str| format!("task.{name}.{k}");
            t.ensure_known(&["path", "metric", "knowledge"])
                .map_err(|e| match e {
                    Error::Config { key, message } => Error::config(full(&key), message),
                    e => e,
                })?;
            let path = PathBuf::from(
                t.get_str("path")
                    .ok_or_else(|| Error::config(full("path"), "required key is missing"))?,
            );
            let metric = t
                .get::<Metric>("metric")
                .map_err(|_| Error::config(full("metric"), "expected accuracy, ppl, f1 or bleu"))?
                .ok_or_else(|| Error::config(full("metric"), "required key is missing"))?;
            let knowledge_intensive = match t.get_str("knowledge") {
                Some(v) => parse_bool(&full("knowledge"), v)?,
                None => false,
            };
            tasks.push(EvalTask {
                task: name.to_string(),
                path: if path.is_absolute() { path } else { base.join(path) },
                metric,
                knowledge_intensive,
            });
        }
        let ppl_scope = match cfg.get_str("ppl_scope").unwrap_or("full") {
            "full" => PplScope::Full,
            "answer-only" => PplScope::AnswerOnly,
            other => return Err(Error::config("ppl_scope", format!("expected full or answer-only, got {other:?}"))),
        };
        Ok(Self {
            tasks,
            options: EvalOptions {
                max_new_tokens: cfg.get_or("max_new_tokens", 64)?,
                ppl_scope,
            },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_config(&FlatConfig::load(path)?, base)
    }

    /// Reads every task's dataset.
    pub fn load_data(&self) -> Result<Vec<(EvalTask, Vec<InstructionSample>)>> {
        self.tasks
            .iter()
            .map(|t| {
                if !t.path.exists() {
                    return Err(Error::config(
                        format!("task.{}.path", t.task),
                        format!("{} does not exist", t.path.display()),
                    ));
                }
                Ok((t.clone(), read_jsonl(&t.path)?))
            })
            .collect()
    }
}

/// Scores `model` on one task.
///
/// PPL is the mean of per-sample perplexities; generation metrics decode
/// greedily from `[BOS] query [SEP]`. Samples are reduced in input order.
pub fn evaluate_task(
    model: &TinyLm,
    task: &str,
    metric: Metric,
    samples: &[InstructionSample],
    opts: &EvalOptions,
) -> Result<MetricResult> {
    if samples.is_empty() {
        return Err(Error::data(format!("task {task}: no evaluation samples")));
    }
    let value = match metric {
        Metric::Ppl => {
            let mut total = 0.0;
            for s in samples {
                total += sample_nll(model, s, opts.ppl_scope)?.exp();
            }
            total / samples.len() as f64
        }
        _ => {
            let preds = samples
                .iter()
                .map(|s| model.respond(&s.query, opts.max_new_tokens))
                .collect::<Result<Vec<_>>>()?;
            let golds: Vec<&str> = samples.iter().map(|s| s.response.as_str()).collect();
            match metric {
                Metric::Accuracy => exact_accuracy(&preds, &golds)?,
                Metric::F1 => {
                    preds.iter().zip(&golds).map(|(p, g)| char_f1(p, g)).sum::<f64>() / preds.len() as f64
                }
                Metric::Bleu => {
                    let mut total = 0.0;
                    for (p, g) in preds.iter().zip(&golds) {
                        total += bleu(p, g, 4)?;
                    }
                    total / preds.len() as f64
                }
                Metric::Ppl => unreachable!(),
            }
        }
    };
    MetricResult::new(task, metric, value, samples.len())
}

/// Evaluates every task, in order.
pub fn evaluate_all(
    model: &TinyLm,
    tasks: &[(EvalTask, Vec<InstructionSample>)],
    opts: &EvalOptions,
) -> Result<Vec<MetricResult>> {
    tasks
        .iter()
        .map(|(t, data)| evaluate_task(model, &t.task, t.metric, data, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parses_tasks_in_name_order() {
        let cfg = FlatConfig::parse(
            "task.zeta.path=z.jsonl\ntask.zeta.metric=f1\ntask.alpha.path=/abs/a.jsonl\ntask.alpha.metric=accuracy\ntask.alpha.knowledge=true\n",
        )
        .unwrap();
        let m = EvalManifest::from_config(&cfg, Path::new("/base")).unwrap();
        assert_eq!(m.tasks[0].task, "alpha");
        assert!(m.tasks[0].knowledge_intensive);
        assert_eq!(m.tasks[0].path, PathBuf::from("/abs/a.jsonl"));
        assert_eq!(m.tasks[1].path, PathBuf::from("/base/z.jsonl"));
        assert_eq!(m.options, EvalOptions::default());
    }

    #[test]
    fn manifest_errors_name_keys() {
        let cfg = FlatConfig::parse("task.a.path=x\ntask.a.metric=rouge").unwrap();
        match EvalManifest::from_config(&cfg, Path::new(".")) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "task.a.metric"),
            other => panic!("{other:?}"),
        }
        let cfg = FlatConfig::parse("task.a.metric=ppl").unwrap();
        match EvalManifest::from_config(&cfg, Path::new(".")) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "task.a.path"),
            other => panic!("{other:?}"),
        }
    }
}
