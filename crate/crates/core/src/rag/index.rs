use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::digest::sha256_parts;
use crate::error::{Error, Result};
use crate::rag::record::{truncate_key, KVRecord, TaskTag, TruncatedKey};

pub const DEFAULT_MAX_MATCHES: usize = 16;

/// Bump when the lookup layout changes, so old signatures stop matching.
pub const INDEX_VERSION: &str = "kv-index-1";

/// One (record, key level) entry of a sorted lookup table.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Slot {
    key: String,
    record: usize,
    level: usize,
}

/// Immutable prefix/suffix index over a knowledge base.
#[derive(Debug, Clone)]
pub struct KVIndex {
    records: Vec<KVRecord>,
    /// Entries sorted by key.
    by_prefix: Vec<Slot>,
    /// Entries sorted by reversed key.
    by_suffix: Vec<Slot>,
    signature: String,
    warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalHit<'a> {
    pub record: &'a KVRecord,
    pub record_index: usize,
    /// Position of the matching key level within the record.
    pub level_index: usize,
    pub key: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retrieval<'a> {
    pub hits: Vec<RetrievalHit<'a>>,
    /// True when more than `max_matches` records matched.
    pub overflow: bool,
    pub total_matches: usize,
}

fn reversed(s: &str) -> String {
    s.chars().rev().collect()
}

impl KVIndex {
    pub fn build(records: Vec<KVRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::data("cannot index an empty knowledge base"));
        }
        let mut by_prefix = Vec::new();
        let mut by_suffix = Vec::new();
        for (ri, r) in records.iter().enumerate() {
            for (li, kl) in r.key_levels().iter().enumerate() {
                by_prefix.push(Slot {
                    key: kl.key.clone(),
                    record: ri,
                    level: li,
                });
                by_suffix.push(Slot {
                    key: reversed(&kl.key),
                    record: ri,
                    level: li,
                });
            }
        }
        by_prefix.sort();
        by_suffix.sort();

        let mut seen: BTreeMap<(Vec<(String, String)>, TaskTag), usize> = BTreeMap::new();
        let mut warnings = Vec::new();
        for (ri, r) in records.iter().enumerate() {
            let levels: Vec<(String, String)> = r
                .key_levels()
                .iter()
                .map(|kl| (kl.level.clone(), kl.key.clone()))
                .collect();
            for &tag in r.task_tags() {
                if let Some(first) = seen.insert((levels.clone(), tag), ri) {
                    warnings.push(format!(
                        "records {first} and {ri} share key levels {levels:?} for task {tag}"
                    ));
                }
            }
        }

        let signature = sha256_parts(
            std::iter::once(INDEX_VERSION.to_string())
                .chain(records.iter().map(|r| serde_json::to_string(r).expect("records serialise"))),
        );
        Ok(Self {
            records,
            by_prefix,
            by_suffix,
            signature,
            warnings,
        })
    }

    pub fn records(&self) -> &[KVRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Hash of the indexed records; equal inputs give equal signatures.
    pub fn signature(&self) -> &str {
        &self.signature
    }

    /// Duplicate (key levels, task) collisions found while building.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn prefix_range(&self, prefix: &str) -> BTreeSet<(usize, usize)> {
        let start = self.by_prefix.partition_point(|s| s.key.as_str() < prefix);
        self.by_prefix[start..]
            .iter()
            .take_while(|s| s.key.starts_with(prefix))
            .map(|s| (s.record, s.level))
            .collect()
    }

    fn suffix_range(&self, suffix: &str) -> BTreeSet<(usize, usize)> {
        let rev = reversed(suffix);
        let start = self.by_suffix.partition_point(|s| s.key.as_str() < rev.as_str());
        self.by_suffix[start..]
            .iter()
            .take_while(|s| s.key.starts_with(&rev))
            .map(|s| (s.record, s.level))
            .collect()
    }

    /// Records serving `task` with a key level that `query` matches, ranked
    /// by earliest matching level, then shorter key, then key text, then
    /// record position.
    pub fn retrieve(&self, query: &TruncatedKey, task: TaskTag, max_matches: usize) -> Retrieval<'_> {
        let candidates: Vec<(usize, usize)> = if query.elided {
            let p = self.prefix_range(&query.prefix);
            let s = self.suffix_range(&query.suffix);
            p.intersection(&s).copied().collect()
        } else {
            let start = self.by_prefix.partition_point(|s| s.key < query.prefix);
            self.by_prefix[start..]
                .iter()
                .take_while(|s| s.key == query.prefix)
                .map(|s| (s.record, s.level))
                .collect()
        };
        // Best matching level per record.
        let mut best: BTreeMap<usize, usize> = BTreeMap::new();
        for (r, l) in candidates {
            let key = &self.records[r].key_levels()[l].key;
            if !query.matches(key) || !self.records[r].task_tags().contains(&task) {
                continue;
            }
            best.entry(r).and_modify(|b| *b = (*b).min(l)).or_insert(l);
        }
        let mut hits: Vec<RetrievalHit<'_>> = best
            .into_iter()
            .map(|(r, l)| RetrievalHit {
                record: &self.records[r],
                record_index: r,
                level_index: l,
                key: &self.records[r].key_levels()[l].key,
            })
            .collect();
        hits.sort_by(|a, b| {
            a.level_index
                .cmp(&b.level_index)
                .then(a.key.chars().count().cmp(&b.key.chars().count()))
                .then(a.key.cmp(b.key))
                .then(a.record_index.cmp(&b.record_index))
        });
        let total = hits.len();
        hits.truncate(max_matches);
        Retrieval {
            overflow: total > max_matches,
            total_matches: total,
            hits,
        }
    }

    /// Truncates `key` with fragment length `k` (a no-op for short keys)
    /// and retrieves.
    pub fn retrieve_str(&self, key: &str, k: usize, task: TaskTag, max_matches: usize) -> Result<Retrieval<'_>> {
        Ok(self.retrieve(&truncate_key(key, k)?, task, max_matches))
    }
}
