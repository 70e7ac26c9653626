use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{read_jsonl, InstructionSample};

/// Structured source data for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub task: String,
    pub fields: BTreeMap<String, String>,
}

impl LabeledRecord {
    pub fn new<K: Into<String>, V: Into<String>>(task: impl Into<String>, fields: impl IntoIterator<Item = (K, V)>) -> Self {
        Self {
            task: task.into(),
            fields: fields.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Vec<Self>> {
        read_jsonl(path)
    }
}

/// Query and response patterns with `{field}` slots.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Template {
    pub task: String,
    pub query_pattern: String,
    pub response_pattern: String,
}

/// Splits a pattern into literal text and `{name}` slots.
fn placeholders(pattern: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut rest = pattern;
    let mut offset = 0;
    while let Some(open) = rest.find(['{', '}']) {
        if rest[open..].starts_with('}') {
            return Err(Error::Parse {
                offset: offset + open,
                message: "unmatched '}'".into(),
            });
        }
        let close = rest[open + 1..].find(['{', '}']).map(|i| open + 1 + i);
        match close {
            Some(c) if rest[c..].starts_with('}') => {
                let name = &rest[open + 1..c];
                if name.is_empty() || !name.chars().all(|ch| ch.is_alphanumeric() || ch == '_') {
                    return Err(Error::Parse {
                        offset: offset + open,
                        message: format!("invalid placeholder {{{name}}}"),
                    });
                }
                out.push(name.to_string());
                offset += c + 1;
                rest = &rest[c + 1..];
            }
            _ => {
                return Err(Error::Parse {
                    offset: offset + open,
                    message: "unterminated placeholder".into(),
                })
            }
        }
    }
    Ok(out)
}

fn substitute(pattern: &str, fields: &BTreeMap<String, String>) -> Option<String> {
    let mut out = String::with_capacity(pattern.len());
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = open + rest[open..].find('}')?;
        out.push_str(fields.get(&rest[open + 1..close])?);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Some(out)
}

impl Template {
    pub fn new(task: impl Into<String>, query_pattern: impl Into<String>, response_pattern: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            query_pattern: query_pattern.into(),
            response_pattern: response_pattern.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Vec<Self>> {
        read_jsonl(path)
    }

    /// Every slot name in both patterns.
    pub fn placeholders(&self) -> Result<BTreeSet<String>> {
        let mut s: BTreeSet<String> = placeholders(&self.query_pattern)?.into_iter().collect();
        s.extend(placeholders(&self.response_pattern)?);
        Ok(s)
    }

    /// Checks syntax and that every slot names one of `fields`.
    pub fn validate(&self, fields: &BTreeSet<String>) -> Result<()> {
        if self.query_pattern.trim().is_empty() || self.response_pattern.trim().is_empty() {
            return Err(Error::data("template patterns must be non-empty"));
        }
        if let Some(unknown) = self.placeholders()?.into_iter().find(|p| !fields.contains(p)) {
            return Err(Error::data(format!("unknown placeholder {{{unknown}}}")));
        }
        Ok(())
    }

    /// Substitutes `record`'s fields verbatim; `None` if a slot is missing.
    pub fn fill(&self, record: &LabeledRecord) -> Option<InstructionSample> {
        Some(InstructionSample::new(
            self.task.clone(),
            substitute(&self.query_pattern, &record.fields)?,
            substitute(&self.response_pattern, &record.fields)?,
        ))
    }

    /// `Q: <query pattern>\nA: <response pattern>`, the wire form exchanged
    /// with the annotation model.
    pub fn to_wire(&self) -> String {
        format!("Q: {}\nA: {}", self.query_pattern, self.response_pattern)
    }

    pub fn from_wire(task: &str, text: &str) -> Result<Self> {
        let (q, a) = parse_qa_wire(text)?;
        Ok(Self::new(task, q, a))
    }
}

/// Parses `Q: ...\nA: ...`.
pub fn parse_qa_wire(text: &str) -> Result<(String, String)> {
    let text = text.trim();
    let rest = text
        .strip_prefix("Q: ")
        .ok_or_else(|| Error::data(format!("expected 'Q: ' at the start of {text:?}")))?;
    let (q, a) = rest
        .split_once("\nA: ")
        .ok_or_else(|| Error::data(format!("no 'A: ' line in {text:?}")))?;
    if q.trim().is_empty() || a.trim().is_empty() {
        return Err(Error::data("empty question or answer"));
    }
    Ok((q.trim().to_string(), a.trim().to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillOutcome {
    pub samples: Vec<InstructionSample>,
    /// (template index, record index) pairs skipped for missing fields.
    pub dropped: Vec<(usize, usize)>,
}

/// Every template applied to every record, template-major. Pairs with an
/// unresolvable slot are dropped and counted, so
/// `samples + dropped = templates × records`.
pub fn fill_templates(templates: &[Template], records: &[LabeledRecord]) -> Result<FillOutcome> {
    let tasks: BTreeSet<&str> = templates
        .iter()
        .map(|t| t.task.as_str())
        .chain(records.iter().map(|r| r.task.as_str()))
        .collect();
    if tasks.len() > 1 {
        return Err(Error::contract(format!("templates and records span several tasks: {tasks:?}")));
    }
    let mut samples = Vec::new();
    let mut dropped = Vec::new();
    for (ti, t) in templates.iter().enumerate() {
        for (ri, r) in records.iter().enumerate() {
            match t.fill(r) {
                Some(s) => samples.push(s),
                None => dropped.push((ti, ri)),
            }
        }
    }
    Ok(FillOutcome { samples, dropped })
}
