use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::lm::{token_nll, TinyLm};
use crate::sample::InstructionSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Ppl,
    F1,
    Bleu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Metric {
    pub fn direction(self) -> Direction {
        match self {
            Metric::Ppl => Direction::LowerBetter,
            _ => Direction::HigherBetter,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Ppl => "ppl",
            Metric::F1 => "f1",
            Metric::Bleu => "bleu",
        }
    }

    /// Header label used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            Metric::Accuracy => "ACC",
            Metric::Ppl => "PPL",
            Metric::F1 => "F1",
            Metric::Bleu => "BLEU",
        }
    }

    /// Two-decimal display value; F1 and BLEU are shown ×100.
    pub fn format(self, value: f64) -> String {
        match self {
            Metric::F1 | Metric::Bleu => format!("{:.2}", value * 100.0),
            Metric::Accuracy | Metric::Ppl => format!("{value:.2}"),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "ppl" => Ok(Metric::Ppl),
            "f1" => Ok(Metric::F1),
            "bleu" => Ok(Metric::Bleu),
            _ => Err(format!("unknown metric {s:?} (expected accuracy, ppl, f1 or bleu)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub task: String,
    pub metric: Metric,
    pub value: f64,
    pub count: usize,
    pub direction: Direction,
}

impl MetricResult {
    pub fn new(task: impl Into<String>, metric: Metric, value: f64, count: usize) -> Result<Self> {
        let ok = value.is_finite()
            && match metric {
                Metric::Accuracy => (0.0..=100.0).contains(&value),
                Metric::Ppl => value >= 1.0 - 1e-9,
                Metric::F1 | Metric::Bleu => (0.0..=1.0).contains(&value),
            };
        if !ok {
            return Err(Error::range(format!("{metric} value {value} out of bounds")));
        }
        Ok(Self {
            task: task.into(),
            metric,
            value,
            count,
            direction: metric.direction(),
        })
    }

    pub fn display_value(&self) -> String {
        self.metric.format(self.value)
    }
}

/// Which positions of `[BOS] q [SEP] r [EOS]` count towards perplexity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PplScope {
    /// Every predicted position, question included.
    #[default]
    Full,
    /// Only the response tokens and the closing EOS.
    AnswerOnly,
}

/// Mean next-token NLL of one instruction sample.
pub fn sample_nll(model: &TinyLm, qa: &InstructionSample, scope: PplScope) -> Result<f64> {
    let ids = model.tokenizer.encode_instruction(&qa.query, &qa.response);
    let n_pred = ids.len() - 1;
    if n_pred > model.config.max_seq_len {
        return Err(Error::range(format!(
            "sample needs {n_pred} positions, max_seq_len is {}",
            model.config.max_seq_len
        )));
    }
    let (logits, _) = model.forward(&ids[..n_pred], false)?;
    let nll = token_nll(&logits, &ids[1..])?;
    // Target index of the first response token is the SEP position.
    let first = match scope {
        PplScope::Full => 0,
        PplScope::AnswerOnly => model.tokenizer.encode_query_prompt(&qa.query).len() - 1,
    };
    let picked: Vec<f64> = nll[first..].iter().flatten().copied().collect();
    if picked.is_empty() {
        return Err(Error::data("no scored positions"));
    }
    Ok(picked.iter().sum::<f64>() / picked.len() as f64)
}

/// `exp` of the mean NLL over the concatenated question and answer.
pub fn perplexity(model: &TinyLm, qa: &InstructionSample) -> Result<f64> {
    Ok(sample_nll(model, qa, PplScope::Full)?.exp())
}

/// Unicode NFC followed by trimming.
pub fn normalize_answer(s: &str) -> String {
    s.nfc().collect::<String>().trim().to_string()
}

/// Percentage of exact matches after normalisation.
pub fn exact_accuracy<P: AsRef<str>, G: AsRef<str>>(preds: &[P], golds: &[G]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} references",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::data("accuracy needs at least one pair"));
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize_answer(p.as_ref()) == normalize_answer(g.as_ref()))
        .count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

fn char_counts(s: &str) -> HashMap<char, usize> {
    let mut m = HashMap::new();
    for c in s.chars() {
        *m.entry(c).or_insert(0) += 1;
    }
    m
}

/// F1 over character multisets. Two empty strings score 1.
pub fn char_f1(pred: &str, gold: &str) -> f64 {
    let (p, g) = (char_counts(pred), char_counts(gold));
    let (np, ng) = (pred.chars().count(), gold.chars().count());
    if np == 0 && ng == 0 {
        return 1.0;
    }
    let overlap: usize = p
        .iter()
        .map(|(c, n)| (*n).min(g.get(c).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / np as f64;
    let recall = overlap as f64 / ng as f64;
    2.0 * precision * recall / (precision + recall)
}

fn ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Character n-gram BLEU with brevity penalty.
///
/// Orders above one use add-one smoothing on both the clipped matches and
/// the candidate count, so short strings do not collapse to zero; unigram
/// precision is unsmoothed, so a prediction sharing no character with the
/// reference scores exactly 0.
pub fn bleu(pred: &str, gold: &str, max_n: usize) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::data("BLEU reference is empty"));
    }
    if max_n == 0 {
        return Err(Error::range("BLEU max_n must be at least 1"));
    }
    let p: Vec<char> = pred.chars().collect();
    let g: Vec<char> = gold.chars().collect();
    if p.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let pc = ngram_counts(&p, n);
        let gc = ngram_counts(&g, n);
        let matched: usize = pc
            .iter()
            .map(|(k, c)| (*c).min(gc.get(k).copied().unwrap_or(0)))
            .sum();
        let total = p.len().saturating_sub(n - 1);
        let (num, den) = if n == 1 {
            (matched as f64, total as f64)
        } else {
            (matched as f64 + 1.0, total as f64 + 1.0)
        };
        if num == 0.0 {
            return Ok(0.0);
        }
        log_sum += (num / den).ln();
    }
    let (c, r) = (p.len() as f64, g.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok((bp * (log_sum / max_n as f64).exp()).min(1.0))
}

/// Signed change from `before` to `after`, positive meaning the task got
/// worse.
pub fn forgetting_delta(before: &MetricResult, after: &MetricResult) -> Result<f64> {
    if before.task != after.task || before.metric != after.metric {
        return Err(Error::contract(format!(
            "cannot compare {}/{} with {}/{}",
            before.task, before.metric, after.task, after.metric
        )));
    }
    Ok(match before.direction {
        Direction::LowerBetter => after.value - before.value,
        Direction::HigherBetter => before.value - after.value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_prints_two_decimals() {
        let golds = vec!["x"; 30];
        let mut preds = golds.clone();
        preds[0] = "y";
        let acc = exact_accuracy(&preds, &golds).unwrap();
        assert_eq!(Metric::Accuracy.format(acc), "96.67");
        assert_eq!(exact_accuracy(&golds, &golds).unwrap(), 100.0);
        assert!(exact_accuracy(&golds[..2], &golds).is_err());
    }

    #[test]
    fn accuracy_normalises() {
        assert_eq!(exact_accuracy(&[" e\u{301} "], &["\u{e9}"]).unwrap(), 100.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(char_f1("abc", "abc"), 1.0);
        assert_eq!(char_f1("abc", "xyz"), 0.0);
        assert!((char_f1("abc", "abd") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(char_f1("", ""), 1.0);
        assert_eq!(char_f1("", "a"), 0.0);
    }

    #[test]
    fn bleu_boundaries() {
        assert_eq!(bleu("abcdef", "abcdef", 4).unwrap(), 1.0);
        assert_eq!(bleu("a", "a", 4).unwrap(), 1.0);
        assert_eq!(bleu("xyz", "abc", 4).unwrap(), 0.0);
        assert_eq!(bleu("", "abc", 4).unwrap(), 0.0);
        assert!(bleu("abc", "", 4).is_err());
        let partial = bleu("abcd", "abce", 4).unwrap();
        assert!(partial > 0.0 && partial < 1.0);
    }

    #[test]
    fn forgetting_sign_convention() {
        let a = MetricResult::new("t", Metric::Ppl, 10.75, 1).unwrap();
        let b = MetricResult::new("t", Metric::Ppl, 12.75, 1).unwrap();
        assert_eq!(forgetting_delta(&a, &b).unwrap(), 2.0);
        assert_eq!(forgetting_delta(&a, &a).unwrap(), 0.0);
        let a = MetricResult::new("t", Metric::Accuracy, 96.67, 30).unwrap();
        let b = MetricResult::new("t", Metric::Accuracy, 100.0, 30).unwrap();
        assert!((forgetting_delta(&a, &b).unwrap() + 3.33).abs() < 1e-9);
        let c = MetricResult::new("u", Metric::Accuracy, 100.0, 30).unwrap();
        assert!(forgetting_delta(&a, &c).is_err());
    }

    #[test]
    fn bounds_enforced() {
        assert!(MetricResult::new("t", Metric::Accuracy, 101.0, 1).is_err());
        assert!(MetricResult::new("t", Metric::Ppl, 0.5, 1).is_err());
        assert!(MetricResult::new("t", Metric::F1, 1.5, 1).is_err());
    }
}
