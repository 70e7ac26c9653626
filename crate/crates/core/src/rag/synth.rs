//! Synthetic poems as a knowledge base, with author questions over it.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rag::record::{truncate_key, KVRecord, KeyLevel, TaskTag};
use crate::sample::InstructionSample;

const SYLLABLES: [&str; 24] = [
    "an", "bai", "chun", "dong", "feng", "gu", "hua", "jin", "lan", "li", "ming", "nan", "qing", "ren", "shan", "tian",
    "wu", "xi", "yan", "yue", "zhu", "he", "lu", "song",
];

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| *SYLLABLES.choose(rng).expect("non-empty"))
        .collect()
}

fn phrase(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words)
        .map(|_| {
            let n = rng.gen_range(1..=2);
            word(rng, n)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n` poems keyed by title. Titles are redrawn until their `(first k,
/// last k)` fragments are unique, so truncated lookup is unambiguous.
pub fn knowledge_base(n: usize, k: usize, seed: u64) -> Result<Vec<KVRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let authors: Vec<String> = (0..40).map(|_| {
        let s = rng.gen_range(2..=3);
        word(&mut rng, s)
    }).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n + 100 {
            return Err(Error::data(format!("could not draw {n} distinct titles")));
        }
        let words = rng.gen_range(4..=6);
        let title = phrase(&mut rng, words);
        let t = truncate_key(&title, k)?;
        if !t.elided || !seen.insert((t.prefix, t.suffix)) {
            continue;
        }
        let author = authors.choose(&mut rng).expect("non-empty").clone();
        let lines: Vec<String> = (0..4).map(|_| phrase(&mut rng, 5)).collect();
        let value = format!("title: {title}\nauthor: {author}\npoem: {}", lines.join(" / "));
        out.push(KVRecord::new(
            vec![KeyLevel::new("title", title)],
            value,
            [TaskTag::AuthorRetrieval, TaskTag::EntirePoem],
        )?);
    }
    Ok(out)
}

/// Reads the `field: value` line of a record value or reference block.
pub fn field<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(name).and_then(|r| r.strip_prefix(": ")))
}

/// "who wrote <title>?" → author, one per record.
pub fn author_questions(records: &[KVRecord]) -> Vec<InstructionSample> {
    records
        .iter()
        .filter_map(|r| {
            let title = r.key("title")?;
            let author = field(r.value(), "author")?;
            Some(InstructionSample::new(
                TaskTag::AuthorRetrieval.as_str(),
                format!("who wrote {title}?"),
                author,
            ))
        })
        .collect()
}
