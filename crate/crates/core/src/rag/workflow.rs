use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::TinyLm;
use crate::rag::call::{detect_retrieval_call, RetrievalCall, CALL_OPEN};
use crate::rag::index::{KVIndex, DEFAULT_MAX_MATCHES};
use crate::rag::record::{KVRecord, TaskTag};
use crate::rag::REFERENCE_DELIMITER;
use crate::sample::InstructionSample;

/// The two training views of one knowledge-intensive sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RagFormats {
    /// Original query; the response is the retrieval call.
    pub format_a: InstructionSample,
    /// Query plus reference block; the original response.
    pub format_b: InstructionSample,
}

fn separator() -> String {
    format!("\n{REFERENCE_DELIMITER}\n")
}

/// `query`, the delimiter line, then `reference`.
pub fn assemble_reference_prompt(query: &str, reference: &str) -> Result<String> {
    if query.lines().any(|l| l == REFERENCE_DELIMITER) {
        return Err(Error::data("query already carries a reference block"));
    }
    Ok(format!("{query}{}{reference}", separator()))
}

/// Splits a reference-augmented query back into (query, reference).
pub fn parse_reference_prompt(prompt: &str) -> Result<(String, String)> {
    let sep = separator();
    let mut parts = prompt.splitn(2, sep.as_str());
    let (Some(q), Some(r)) = (parts.next(), parts.next()) else {
        return Err(Error::data("prompt has no reference block"));
    };
    if r.lines().any(|l| l == REFERENCE_DELIMITER) {
        return Err(Error::data("prompt has more than one reference block"));
    }
    Ok((q.to_string(), r.to_string()))
}

/// Builds format A (query → retrieval call with every key level of `record`
/// truncated to `k`) and format B (query + reference → original answer).
pub fn reformat_knowledge_sample(sample: &InstructionSample, record: &KVRecord, k: usize) -> Result<RagFormats> {
    let task: TaskTag = sample.task.parse().map_err(|_| {
        Error::data(format!("task {:?} is not knowledge-intensive", sample.task))
    })?;
    if sample.response.starts_with(CALL_OPEN) {
        return Err(Error::data("sample is already in retrieval-call form"));
    }
    if !record.task_tags().contains(&task) {
        return Err(Error::data(format!("record does not serve task {task}")));
    }
    let call = RetrievalCall::for_record(record, task, k)?;
    Ok(RagFormats {
        format_a: InstructionSample::new(sample.task.clone(), sample.query.clone(), call.to_string()),
        format_b: InstructionSample::new(
            sample.task.clone(),
            assemble_reference_prompt(&sample.query, record.value())?,
            sample.response.clone(),
        ),
    })
}

/// Anything that turns a prompt into text.
pub trait Reader {
    fn read(&self, prompt: &str) -> Result<String>;
}

/// Greedy decoding with a [`TinyLm`].
pub struct LmReader<'a> {
    pub model: &'a TinyLm,
    pub max_new_tokens: usize,
}

impl Reader for LmReader<'_> {
    fn read(&self, prompt: &str) -> Result<String> {
        self.model.respond(prompt, self.max_new_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissPolicy {
    /// Return the pass-1 output flagged as lacking evidence.
    #[default]
    Pass1Answer,
    /// Fail the query.
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RagOptions {
    /// Records injected into the reference block.
    pub inject: usize,
    pub max_matches: usize,
    pub on_miss: MissPolicy,
}

impl Default for RagOptions {
    fn default() -> Self {
        Self {
            inject: 1,
            max_matches: DEFAULT_MAX_MATCHES,
            on_miss: MissPolicy::Pass1Answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pass {
    pub prompt: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RagAnswer {
    pub answer: String,
    pub passes: Vec<Pass>,
    pub call: Option<RetrievalCall>,
    /// Indices of the injected records.
    pub retrieved: Vec<usize>,
    pub no_evidence: bool,
}

/// Pass 1 answers the raw query. If it emits a retrieval call, the top
/// records are looked up and pass 2 answers the reference-augmented query.
pub fn answer_with_rag<R: Reader + ?Sized>(reader: &R, index: &KVIndex, query: &str, opts: &RagOptions) -> Result<RagAnswer> {
    let first = reader.read(query)?;
    let mut passes = vec![Pass {
        prompt: query.to_string(),
        output: first.clone(),
    }];
    let Some(call) = detect_retrieval_call(&first)? else {
        return Ok(RagAnswer {
            answer: first,
            passes,
            call: None,
            retrieved: Vec::new(),
            no_evidence: false,
        });
    };
    let found = index.retrieve(call.primary(), call.task, opts.max_matches);
    // Secondary levels narrow the candidates when the record has them.
    let hits: Vec<_> = found
        .hits
        .into_iter()
        .filter(|h| {
            call.levels[1..]
                .iter()
                .all(|(level, key)| h.record.key(level).is_none_or(|k| key.matches(k)))
        })
        .take(opts.inject.max(1))
        .collect();
    if hits.is_empty() {
        return match opts.on_miss {
            MissPolicy::Pass1Answer => Ok(RagAnswer {
                answer: first,
                passes,
                call: Some(call),
                retrieved: Vec::new(),
                no_evidence: true,
            }),
            MissPolicy::Error => Err(Error::data(format!("no record matches {call}"))),
        };
    }
    let reference = hits.iter().map(|h| h.record.value()).collect::<Vec<_>>().join("\n");
    let prompt = assemble_reference_prompt(query, &reference)?;
    let second = reader.read(&prompt)?;
    passes.push(Pass {
        prompt,
        output: second.clone(),
    });
    Ok(RagAnswer {
        answer: second,
        passes,
        call: Some(call),
        retrieved: hits.iter().map(|h| h.record_index).collect(),
        no_evidence: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rag::record::KeyLevel;

    fn record() -> KVRecord {
        KVRecord::new(
            vec![KeyLevel::new("title", "P")],
            "title: P\nauthor: A\npoem: T",
            [TaskTag::AuthorRetrieval],
        )
        .unwrap()
    }

    #[test]
    fn formats_for_author_question() {
        let s = InstructionSample::new("author-retrieval", "Who wrote P?", "A");
        let f = reformat_knowledge_sample(&s, &record(), 8).unwrap();
        assert_eq!(f.format_a.query, "Who wrote P?");
        assert_eq!(f.format_a.response, "RETRIEVE(author-retrieval; title=P)");
        assert!(f.format_b.query.contains("poem: T"));
        assert_eq!(f.format_b.response, "A");
        assert_eq!(f.format_b.query.matches(REFERENCE_DELIMITER).count(), 1);
        let (q, r) = parse_reference_prompt(&f.format_b.query).unwrap();
        assert_eq!((q.as_str(), r.as_str()), ("Who wrote P?", record().value()));
    }

    #[test]
    fn reformat_guards() {
        let s = InstructionSample::new("punctuation", "q", "r");
        assert!(reformat_knowledge_sample(&s, &record(), 8).is_err());
        let s = InstructionSample::new("author-retrieval", "Who wrote P?", "A");
        let f = reformat_knowledge_sample(&s, &record(), 8).unwrap();
        assert!(reformat_knowledge_sample(&f.format_b, &record(), 8).is_err());
        assert!(reformat_knowledge_sample(&f.format_a, &record(), 8).is_err());
    }
}
