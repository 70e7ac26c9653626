use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::model::TinyLm;
use crate::lm::tokenizer::{BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    /// Temperature-1 sampling from a ChaCha stream seeded with the value.
    Sampled(u64),
}

impl TinyLm {
    /// Extends `prefix` by up to `max_new` tokens, stopping early at EOS.
    /// Returns only the new ids (without the EOS).
    pub fn generate_ids(&self, prefix: &[usize], max_new: usize, mode: Decoding) -> Result<Vec<usize>> {
        if prefix.is_empty() {
            return Err(Error::contract("generation needs a non-empty prefix"));
        }
        if prefix.len() + max_new > self.config.max_seq_len {
            return Err(Error::range(format!(
                "prompt of {} tokens plus {max_new} new exceeds max_seq_len {}",
                prefix.len(),
                self.config.max_seq_len
            )));
        }
        let mut rng = match mode {
            Decoding::Sampled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decoding::Greedy => None,
        };
        let mut ids = prefix.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let (logits, _) = self.forward(&ids, false)?;
            let last = logits.row(logits.rows() - 1);
            let next = match rng.as_mut() {
                None => argmax(last),
                Some(r) => sample(last, r),
            };
            if next == EOS {
                break;
            }
            ids.push(next);
            out.push(next);
        }
        Ok(out)
    }

    /// Continues raw text: the prompt is `[BOS] prompt`.
    pub fn generate(&self, prompt: &str, max_new: usize, mode: Decoding) -> Result<String> {
        let mut prefix = vec![BOS];
        prefix.extend(self.tokenizer.encode_chars(prompt).ids);
        let ids = self.generate_ids(&prefix, max_new, mode)?;
        Ok(self.tokenizer.detokenize(&ids))
    }

    /// Greedy answer to an instruction query (`[BOS] query [SEP]` prompt).
    pub fn respond(&self, query: &str, max_new: usize) -> Result<String> {
        let prefix = self.tokenizer.encode_query_prompt(query);
        let budget = max_new.min(self.config.max_seq_len.saturating_sub(prefix.len()));
        let ids = self.generate_ids(&prefix, budget, Decoding::Greedy)?;
        Ok(self.tokenizer.detokenize(&ids))
    }
}

/// Index of the largest logit; ties go to the lowest id.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    row.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
