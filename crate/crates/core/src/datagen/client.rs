use std::cell::RefCell;
use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::template::{parse_qa_wire, Template};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    Templates,
    QaExtraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_outputs: usize,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_outputs: 8,
            seed: 0,
        }
    }
}

/// One prompt to the annotation model: instructions, in-context examples
/// (already in wire form) and the input to work on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub purpose: Purpose,
    pub system: String,
    pub examples: Vec<String>,
    pub input: String,
    pub params: GenerationParams,
}

/// An instruction-following model used as an annotator.
pub trait AlignedLlmClient {
    fn complete(&self, request: &LlmRequest) -> Result<Vec<String>>;

    /// Whether identical requests always produce identical outputs.
    fn is_deterministic(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            backoff_ms: 0,
        }
    }
}

/// Calls `client`, retrying client errors with linear backoff.
pub fn complete_with_retry<C: AlignedLlmClient + ?Sized>(client: &C, request: &LlmRequest, policy: &RetryPolicy) -> Result<Vec<String>> {
    let mut attempt = 0;
    loop {
        match client.complete(request) {
            Ok(out) => return Ok(out),
            Err(Error::Client(_)) if attempt < policy.max_retries => {
                attempt += 1;
                if policy.backoff_ms > 0 {
                    std::thread::sleep(std::time::Duration::from_millis(policy.backoff_ms * attempt as u64));
                }
            }
            Err(Error::Client(msg)) => {
                return Err(Error::Client(format!("giving up after {} attempts: {msg}", attempt + 1)))
            }
            Err(e) => return Err(e),
        }
    }
}

const QUERY_FRAMES: [&str; 6] = [
    "{q}",
    "Please answer: {q}",
    "Question: {q}",
    "{q} Answer briefly.",
    "I would like to know: {q}",
    "Tell me, {q}",
];

/// In-process stand-in for the annotation model.
///
/// Template requests return rephrasings of the in-context examples;
/// extraction requests return one question per sentence of the input plus
/// one unsupported proposal, so the support check has something to reject.
/// Output depends only on the request.
#[derive(Debug, Default)]
pub struct MockClient {
    scripted: RefCell<VecDeque<Result<Vec<String>>>>,
}

impl MockClient {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the queued replies in order before falling back to the
    /// built-in behaviour.
    pub fn scripted(replies: impl IntoIterator<Item = Result<Vec<String>>>) -> Self {
        Self {
            scripted: RefCell::new(replies.into_iter().collect()),
        }
    }

    fn templates(request: &LlmRequest) -> Result<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(request.params.seed ^ request.input.len() as u64);
        let seeds: Vec<(String, String)> = request
            .examples
            .iter()
            .map(|e| parse_qa_wire(e))
            .collect::<Result<_>>()?;
        if seeds.is_empty() {
            return Err(Error::Client("no in-context examples".into()));
        }
        let mut out = Vec::new();
        for i in 0..request.params.max_outputs {
            let (q, a) = &seeds[i % seeds.len()];
            let frame = QUERY_FRAMES[rng.gen_range(0..QUERY_FRAMES.len())];
            out.push(Template::new("", frame.replace("{q}", q), a.clone()).to_wire());
        }
        Ok(out)
    }

    fn qa(request: &LlmRequest) -> Vec<String> {
        let sentences: Vec<&str> = request
            .input
            .split(['.', '!', '?', '。'])
            .map(str::trim)
            .filter(|s| s.split_whitespace().count() >= 2)
            .collect();
        let mut out: Vec<String> = sentences
            .iter()
            .take(request.params.max_outputs.saturating_sub(1).max(1))
            .map(|s| {
                let words: Vec<&str> = s.split_whitespace().collect();
                let cut = words.len() / 2;
                format!(
                    "Q: What comes after \"{}\"?\nA: {}",
                    words[..cut.max(1)].join(" "),
                    words[cut.max(1)..].join(" ")
                )
            })
            .filter(|w| !w.ends_with("A: "))
            .collect();
        let backwards: String = request.input.chars().rev().collect();
        out.push(format!("Q: What is the moral?\nA: {}", backwards.trim()));
        out
    }
}

impl AlignedLlmClient for MockClient {
    fn complete(&self, request: &LlmRequest) -> Result<Vec<String>> {
        if let Some(reply) = self.scripted.borrow_mut().pop_front() {
            return reply;
        }
        match request.purpose {
            Purpose::Templates => Self::templates(request),
            Purpose::QaExtraction => Ok(Self::qa(request)),
        }
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Chat-completions style HTTP client. The bearer token is read from the
/// environment variable named by `token_env` on every call.
#[cfg(feature = "http")]
#[derive(Debug, Clone)]
pub struct HttpClient {
    pub endpoint: String,
    pub model: String,
    pub token_env: String,
    pub timeout: std::time::Duration,
    client: reqwest::blocking::Client,
}

#[cfg(feature = "http")]
impl HttpClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, token_env: impl Into<String>, timeout: std::time::Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token_env: token_env.into(),
            timeout,
            client,
        })
    }
}

#[cfg(feature = "http")]
impl AlignedLlmClient for HttpClient {
    fn complete(&self, request: &LlmRequest) -> Result<Vec<String>> {
        let token = std::env::var(&self.token_env)
            .map_err(|_| Error::config(self.token_env.clone(), "auth token environment variable is not set"))?;
        let mut messages = vec![serde_json::json!({"role": "system", "content": request.system})];
        for ex in &request.examples {
            messages.push(serde_json::json!({"role": "assistant", "content": ex}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.input}));
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.params.temperature,
            "n": request.params.max_outputs,
            "seed": request.params.seed,
        });
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(token)
            .json(&body)
            .send()
            .map_err(|e| Error::Client(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Client(format!("HTTP {}", resp.status())));
        }
        let v: serde_json::Value = resp.json().map_err(|e| Error::Client(e.to_string()))?;
        let choices = v["choices"]
            .as_array()
            .ok_or_else(|| Error::Client("response has no choices".into()))?;
        Ok(choices
            .iter()
            .filter_map(|c| c["message"]["content"].as_str().map(str::to_string))
            .collect())
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}
