//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every function returns a JSON string so the page needs no generated
//! TypeScript types. Errors come back as `{"error": "..."}`.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use ratlab::curriculum::synth::{alphabet, pretrain_lines};
use ratlab::curriculum::{build_calibration, Corpus};
use ratlab::eval::{bleu, char_f1};
use ratlab::lm::{ModelConfig, TinyLm, Tokenizer};
use ratlab::rag::synth::{field, knowledge_base};
use ratlab::rag::{truncate_key, KVIndex, TaskTag};
use ratlab::rat::plan_from_calibration;

fn reply(r: ratlab::Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn plan_value(n_layers: usize, n_groups: usize, seed: u64) -> ratlab::Result<Value> {
    let tok = Tokenizer::from_chars(alphabet().chars().collect());
    let cfg = ModelConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        vocab_size: tok.vocab_size(),
        max_seq_len: 64,
    };
    let model = TinyLm::new(cfg, tok.clone(), seed)?;
    let corpus = Corpus::from_documents("demo", &pretrain_lines(32, seed), &tok);
    let calib = build_calibration(&corpus, 8, seed)?;
    let (profile, plan) = plan_from_calibration(&model, &calib, n_groups)?;
    Ok(json!({
        "scores": profile.scores,
        "groups": plan.groups().iter().map(|g| [*g.start(), *g.end()]).collect::<Vec<_>>(),
        "selected": plan.selected(),
    }))
}

/// Redundancy scores of a randomly initialised model and the layers the
/// plan would train for `n_groups` groups.
#[wasm_bindgen]
pub fn layer_plan(n_layers: usize, n_groups: usize, seed: u32) -> String {
    reply(plan_value(n_layers, n_groups, seed as u64))
}

/// A synthetic poem collection indexed by title.
#[wasm_bindgen]
pub struct PoemIndex {
    index: KVIndex,
}

#[wasm_bindgen]
impl PoemIndex {
    #[wasm_bindgen(constructor)]
    pub fn new(records: usize, seed: u32) -> Result<PoemIndex, JsValue> {
        let kb = knowledge_base(records, 8, seed as u64).map_err(|e| JsValue::from_str(&e.to_string()))?;
        let index = KVIndex::build(kb).map_err(|e| JsValue::from_str(&e.to_string()))?;
        Ok(PoemIndex { index })
    }

    /// A few titles to try.
    pub fn sample_titles(&self, count: usize) -> String {
        let titles: Vec<&str> = self.index.records().iter().take(count).filter_map(|r| r.key("title")).collect();
        json!(titles).to_string()
    }

    /// Truncates `key` to its first and last `k` characters and lists the
    /// matching records in rank order.
    pub fn lookup(&self, key: &str, k: usize) -> String {
        reply((|| {
            let t = truncate_key(key, k)?;
            let found = self.index.retrieve(&t, TaskTag::AuthorRetrieval, 10);
            let hits: Vec<Value> = found
                .hits
                .iter()
                .map(|h| {
                    json!({
                        "title": h.key,
                        "author": field(h.record.value(), "author"),
                    })
                })
                .collect();
            Ok(json!({
                "truncated": t.render(),
                "total": found.total_matches,
                "overflow": found.overflow,
                "hits": hits,
            }))
        })())
    }
}

/// Character BLEU-4 and character F1 of a prediction against a reference.
#[wasm_bindgen]
pub fn text_scores(prediction: &str, reference: &str) -> String {
    reply(bleu(prediction, reference, 4).map(|b| json!({ "bleu": b, "f1": char_f1(prediction, reference) })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_has_one_layer_per_group() {
        let v: Value = serde_json::from_str(&layer_plan(8, 4, 1)).unwrap();
        assert_eq!(v["selected"].as_array().unwrap().len(), 4);
        assert_eq!(v["scores"].as_array().unwrap().len(), 8);
        let bad: Value = serde_json::from_str(&layer_plan(4, 8, 1)).unwrap();
        assert!(bad["error"].is_string());
    }

    #[test]
    fn lookup_finds_sampled_title() {
        let idx = PoemIndex::new(50, 3).unwrap();
        let titles: Vec<String> = serde_json::from_str(&idx.sample_titles(3)).unwrap();
        let v: Value = serde_json::from_str(&idx.lookup(&titles[0], 8)).unwrap();
        assert_eq!(v["hits"][0]["title"], titles[0].as_str());
    }

    #[test]
    fn scores_for_identical_text() {
        let v: Value = serde_json::from_str(&text_scores("abc def", "abc def")).unwrap();
        assert_eq!(v["bleu"], 1.0);
        assert_eq!(v["f1"], 1.0);
        let e: Value = serde_json::from_str(&text_scores("abc", "")).unwrap();
        assert!(e["error"].is_string());
    }
}
