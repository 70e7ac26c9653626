use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{read_jsonl, write_jsonl};

/// Single reserved ellipsis joining the two fragments of a truncated key.
pub const ELLIPSIS: char = '…';

/// Default fragment length for truncated keys.
pub const DEFAULT_K: usize = 8;

/// Knowledge-intensive task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskTag {
    SourceRetrieval,
    AuthorRetrieval,
    PrevSentence,
    NextSentence,
    EntirePoem,
}

impl TaskTag {
    pub const ALL: [TaskTag; 5] = [
        TaskTag::SourceRetrieval,
        TaskTag::AuthorRetrieval,
        TaskTag::PrevSentence,
        TaskTag::NextSentence,
        TaskTag::EntirePoem,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::SourceRetrieval => "source-retrieval",
            TaskTag::AuthorRetrieval => "author-retrieval",
            TaskTag::PrevSentence => "prev-sentence",
            TaskTag::NextSentence => "next-sentence",
            TaskTag::EntirePoem => "entire-poem",
        }
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::data(format!("{s:?} is not a knowledge-intensive task")))
    }
}

/// True for the five knowledge-intensive task names.
pub fn is_knowledge_task(task: &str) -> bool {
    task.parse::<TaskTag>().is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyLevel {
    pub level: String,
    pub key: String,
}

impl KeyLevel {
    pub fn new(level: impl Into<String>, key: impl Into<String>) -> Self {
        Self {
            level: level.into(),
            key: key.into(),
        }
    }
}

/// Characters that would make a key ambiguous inside a retrieval call.
const KEY_FORBIDDEN: [char; 6] = [ELLIPSIS, ';', '=', '(', ')', '\n'];

/// A knowledge-base entry: ordered key levels, a value, and the tasks it
/// serves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct KVRecord {
    key_levels: Vec<KeyLevel>,
    value: String,
    task_tags: BTreeSet<TaskTag>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    key_levels: Vec<KeyLevel>,
    value: String,
    task_tags: BTreeSet<TaskTag>,
}

impl TryFrom<RawRecord> for KVRecord {
    type Error = Error;

    fn try_from(r: RawRecord) -> Result<Self> {
        KVRecord::new(r.key_levels, r.value, r.task_tags)
    }
}

impl From<KVRecord> for RawRecord {
    fn from(r: KVRecord) -> Self {
        RawRecord {
            key_levels: r.key_levels,
            value: r.value,
            task_tags: r.task_tags,
        }
    }
}

impl KVRecord {
    pub fn new(
        key_levels: Vec<KeyLevel>,
        value: impl Into<String>,
        task_tags: impl IntoIterator<Item = TaskTag>,
    ) -> Result<Self> {
        let value = value.into();
        let task_tags: BTreeSet<TaskTag> = task_tags.into_iter().collect();
        if key_levels.is_empty() {
            return Err(Error::data("record needs at least one key level"));
        }
        for kl in &key_levels {
            if kl.key.is_empty() || kl.level.is_empty() {
                return Err(Error::data("key levels need a non-empty name and key"));
            }
            if kl.key.trim() != kl.key {
                return Err(Error::data(format!("key {:?} has surrounding whitespace", kl.key)));
            }
            if let Some(c) = kl.key.chars().chain(kl.level.chars()).find(|c| KEY_FORBIDDEN.contains(c)) {
                return Err(Error::data(format!("key level {:?} contains reserved {c:?}", kl.level)));
            }
            if !kl.level.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::data(format!("level name {:?} must be [A-Za-z0-9_-]", kl.level)));
            }
        }
        if value.is_empty() {
            return Err(Error::data("record value is empty"));
        }
        if value.lines().any(|l| l == super::REFERENCE_DELIMITER) {
            return Err(Error::data("record value contains the reference delimiter"));
        }
        if task_tags.is_empty() {
            return Err(Error::data("record needs at least one task tag"));
        }
        Ok(Self {
            key_levels,
            value,
            task_tags,
        })
    }

    pub fn key_levels(&self) -> &[KeyLevel] {
        &self.key_levels
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn task_tags(&self) -> &BTreeSet<TaskTag> {
        &self.task_tags
    }

    pub fn key(&self, level: &str) -> Option<&str> {
        self.key_levels
            .iter()
            .find(|kl| kl.level == level)
            .map(|kl| kl.key.as_str())
    }
}

pub fn read_kb(path: &Path) -> Result<Vec<KVRecord>> {
    read_jsonl(path)
}

pub fn write_kb(path: &Path, records: &[KVRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// A key reduced to its first and last `k` characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TruncatedKey {
    pub prefix: String,
    pub suffix: String,
    pub elided: bool,
    pub k: usize,
}

/// Keys longer than `2k` characters keep their first and last `k`
/// characters; shorter keys are kept whole.
pub fn truncate_key(key: &str, k: usize) -> Result<TruncatedKey> {
    if k == 0 {
        return Err(Error::range("fragment length k must be at least 1"));
    }
    if key.is_empty() {
        return Err(Error::data("cannot truncate an empty key"));
    }
    let chars: Vec<char> = key.chars().collect();
    Ok(if chars.len() > 2 * k {
        TruncatedKey {
            prefix: chars[..k].iter().collect(),
            suffix: chars[chars.len() - k..].iter().collect(),
            elided: true,
            k,
        }
    } else {
        TruncatedKey {
            prefix: key.to_string(),
            suffix: String::new(),
            elided: false,
            k,
        }
    })
}

impl TruncatedKey {
    /// A full (unelided) key used as a query.
    pub fn exact(key: &str) -> Self {
        Self {
            prefix: key.to_string(),
            suffix: String::new(),
            elided: false,
            k: key.chars().count().div_ceil(2).max(1),
        }
    }

    /// True when `key` truncates to this fragment pair: an elided query
    /// needs a key longer than `2k` with matching ends; an unelided one
    /// needs the identical key.
    pub fn matches(&self, key: &str) -> bool {
        if self.elided {
            key.chars().count() > 2 * self.k && key.starts_with(&self.prefix) && key.ends_with(&self.suffix)
        } else {
            key == self.prefix
        }
    }

    /// `prefix…suffix`, or the whole key when nothing was elided.
    pub fn render(&self) -> String {
        if self.elided {
            format!("{}{ELLIPSIS}{}", self.prefix, self.suffix)
        } else {
            self.prefix.clone()
        }
    }
}

impl fmt::Display for TruncatedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_examples() {
        let t = truncate_key("the quick brown fox jumps over the lazy dog", 8).unwrap();
        assert_eq!((t.prefix.as_str(), t.suffix.as_str(), t.elided), ("the quic", "lazy dog", true));
        assert_eq!(t.render(), "the quic…lazy dog");

        let t = truncate_key("abcdefgh", 4).unwrap();
        assert!(!t.elided);
        assert_eq!(t.prefix, "abcdefgh");

        let t = truncate_key("abcdefghi", 4).unwrap();
        assert_eq!((t.prefix.as_str(), t.suffix.as_str()), ("abcd", "fghi"));

        assert!(truncate_key("", 4).is_err());
        assert!(truncate_key("abc", 0).is_err());
    }

    #[test]
    fn truncation_counts_characters_not_bytes() {
        let t = truncate_key("静夜思床前明月光疑是地上霜", 2).unwrap();
        assert_eq!((t.prefix.as_str(), t.suffix.as_str()), ("静夜", "上霜"));
    }

    #[test]
    fn record_invariants() {
        let kl = || vec![KeyLevel::new("title", "P")];
        assert!(KVRecord::new(kl(), "", [TaskTag::AuthorRetrieval]).is_err());
        assert!(KVRecord::new(vec![], "v", [TaskTag::AuthorRetrieval]).is_err());
        assert!(KVRecord::new(kl(), "v", []).is_err());
        assert!(KVRecord::new(vec![KeyLevel::new("title", "a;b")], "v", [TaskTag::AuthorRetrieval]).is_err());
        assert!(KVRecord::new(kl(), "x\n### REFERENCE ###\ny", [TaskTag::AuthorRetrieval]).is_err());
        let r = KVRecord::new(kl(), "v", [TaskTag::AuthorRetrieval]).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<KVRecord>(&json).unwrap(), r);
        assert!(serde_json::from_str::<KVRecord>(&json.replace("\"v\"", "\"\"")).is_err());
    }

    #[test]
    fn matching_respects_length_rule() {
        let q = truncate_key("abcdefghi", 4).unwrap();
        assert!(q.matches("abcdXfghi"));
        assert!(q.matches("abcd-long-middle-fghi"));
        assert!(!q.matches("abcdfghi"));
        assert!(TruncatedKey::exact("abc").matches("abc"));
        assert!(!TruncatedKey::exact("abc").matches("abcd"));
    }
}
