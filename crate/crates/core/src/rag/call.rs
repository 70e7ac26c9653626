use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rag::record::{truncate_key, KVRecord, TaskTag, TruncatedKey, ELLIPSIS};

pub const CALL_OPEN: &str = "RETRIEVE(";

/// `RETRIEVE(task; level=fragment; ...)`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalCall {
    pub task: TaskTag,
    pub levels: Vec<(String, TruncatedKey)>,
}

impl RetrievalCall {
    /// A call naming every key level of `record`, truncated to `k`.
    pub fn for_record(record: &KVRecord, task: TaskTag, k: usize) -> Result<Self> {
        let levels = record
            .key_levels()
            .iter()
            .map(|kl| Ok((kl.level.clone(), truncate_key(&kl.key, k)?)))
            .collect::<Result<_>>()?;
        Ok(Self { task, levels })
    }

    /// The key used for index lookup: the first level's.
    pub fn primary(&self) -> &TruncatedKey {
        &self.levels[0].1
    }
}

impl fmt::Display for RetrievalCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{CALL_OPEN}{}", self.task)?;
        for (level, key) in &self.levels {
            write!(f, "; {level}={key}")?;
        }
        f.write_str(")")
    }
}

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Finds the next of `stops` at or after byte `from`.
fn scan(text: &str, from: usize, stops: &[char]) -> Option<(usize, char)> {
    text[from..]
        .char_indices()
        .find(|(_, c)| stops.contains(c))
        .map(|(i, c)| (from + i, c))
}

fn parse_fragment(frag: &str, offset: usize) -> Result<TruncatedKey> {
    if frag.is_empty() {
        return Err(err(offset, "empty key fragment"));
    }
    let mut parts = frag.split(ELLIPSIS);
    let head = parts.next().unwrap_or_default();
    match (parts.next(), parts.next()) {
        (None, _) => Ok(TruncatedKey {
            prefix: frag.to_string(),
            suffix: String::new(),
            elided: false,
            k: frag.chars().count().div_ceil(2),
        }),
        (Some(tail), None) => {
            let (np, ns) = (head.chars().count(), tail.chars().count());
            if np == 0 || ns == 0 {
                return Err(err(offset, "both sides of the ellipsis must be non-empty"));
            }
            if np != ns {
                return Err(err(offset, format!("fragments differ in length ({np} vs {ns})")));
            }
            Ok(TruncatedKey {
                prefix: head.to_string(),
                suffix: tail.to_string(),
                elided: true,
                k: np,
            })
        }
        (Some(_), Some(_)) => Err(err(offset, "more than one ellipsis in a fragment")),
    }
}

/// Parses a rendered fragment pair (`prefix…suffix` or a whole key).
impl std::str::FromStr for TruncatedKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_fragment(s, 0)
    }
}

/// Parses a retrieval call at the start of `output`. Plain answers give
/// `None`; a call that starts but is malformed is a parse error carrying
/// the byte offset of the problem.
pub fn detect_retrieval_call(output: &str) -> Result<Option<RetrievalCall>> {
    if !output.starts_with(CALL_OPEN) {
        return Ok(None);
    }
    let mut pos = CALL_OPEN.len();
    let (tag_end, stop) = scan(output, pos, &[';', ')'])
        .ok_or_else(|| err(output.len(), "unterminated retrieval call"))?;
    let tag_text = &output[pos..tag_end];
    let task: TaskTag = tag_text
        .parse()
        .map_err(|_| err(pos, format!("unknown task tag {tag_text:?}")))?;
    if stop == ')' {
        return Err(err(tag_end, "retrieval call names no key level"));
    }
    pos = tag_end + 1;
    let mut levels = Vec::new();
    loop {
        while output[pos..].starts_with(' ') {
            pos += 1;
        }
        let (eq, c) = scan(output, pos, &['=', ';', ')'])
            .ok_or_else(|| err(output.len(), "unterminated retrieval call"))?;
        if c != '=' {
            return Err(err(eq, "expected level=fragment"));
        }
        let level = &output[pos..eq];
        if level.is_empty() || !level.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(err(pos, format!("invalid level name {level:?}")));
        }
        let start = eq + 1;
        let (end, stop) = scan(output, start, &[';', ')'])
            .ok_or_else(|| err(output.len(), "unterminated retrieval call"))?;
        levels.push((level.to_string(), parse_fragment(&output[start..end], start)?));
        pos = end + 1;
        if stop == ')' {
            break;
        }
    }
    if let Some(i) = output[pos..].find(|c: char| !c.is_whitespace()) {
        return Err(err(pos + i, "unexpected text after retrieval call"));
    }
    Ok(Some(RetrievalCall { task, levels }))
}
