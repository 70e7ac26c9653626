//! Synthetic stand-ins for the data-hungry and data-efficient task families.
//!
//! * `translation`: letter-wise Caesar cipher (shift 3) of short phrases, an
//!   invertible string transformation with exact ground truth.
//! * `punctuation`: insert a comma after every second word and a final period.
//! * `classification`: 4-way topic label for a bag of topic words.
//! * plain text lines for the pre-training corpus.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sample::InstructionSample;

pub const TRANSLATION: &str = "translation";
pub const PUNCTUATION: &str = "punctuation";
pub const CLASSIFICATION: &str = "classification";

const CIPHER_SHIFT: u8 = 3;

const TOPICS: [(&str, &[&str]); 4] = [
    ("nature", &["river", "moon", "pine", "cloud", "rain", "hill", "snow", "wind"]),
    ("war", &["sword", "army", "gate", "horse", "drum", "camp", "spear", "fort"]),
    ("home", &["mother", "door", "lamp", "bed", "tea", "roof", "yard", "bowl"]),
    ("court", &["king", "jade", "hall", "seal", "envoy", "throne", "robe", "minister"]),
];

pub fn caesar(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c.is_ascii_lowercase() {
                (((c as u8 - b'a' + CIPHER_SHIFT) % 26) + b'a') as char
            } else {
                c
            }
        })
        .collect()
}

pub fn punctuate(words: &[&str]) -> String {
    let mut out = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(w);
        if i + 1 == words.len() {
            out.push('.');
        } else if i % 2 == 1 {
            out.push(',');
        }
    }
    out
}

fn all_words() -> Vec<&'static str> {
    TOPICS.iter().flat_map(|(_, ws)| ws.iter().copied()).collect()
}

fn random_word(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

/// Cipher pairs over two random three-letter words.
pub fn translation_samples(n: usize, seed: u64) -> Vec<InstructionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q = format!("{} {}", random_word(&mut rng, 3), random_word(&mut rng, 3));
            let r = caesar(&q);
            InstructionSample::new(TRANSLATION, q, r)
        })
        .collect()
}

pub fn punctuation_samples(n: usize, seed: u64) -> Vec<InstructionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = all_words();
    (0..n)
        .map(|_| {
            let words: Vec<&str> = (0..3).map(|_| *vocab.choose(&mut rng).expect("non-empty")).collect();
            InstructionSample::new(PUNCTUATION, words.join(" "), punctuate(&words))
        })
        .collect()
}

pub fn classification_samples(n: usize, seed: u64) -> Vec<InstructionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (label, words) = TOPICS[rng.gen_range(0..TOPICS.len())];
            let k = rng.gen_range(2..=3);
            let q: Vec<&str> = (0..k).map(|_| *words.choose(&mut rng).expect("non-empty")).collect();
            InstructionSample::new(CLASSIFICATION, q.join(" "), label)
        })
        .collect()
}

/// Plain-text lines mixing topic words and random letter strings.
pub fn pretrain_lines(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = all_words();
    (0..n)
        .map(|_| {
            let k = rng.gen_range(3..=6);
            let words: Vec<String> = (0..k)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        vocab.choose(&mut rng).expect("non-empty").to_string()
                    } else {
                        let len = rng.gen_range(2..=4);
                        random_word(&mut rng, len)
                    }
                })
                .collect();
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            punctuate(&refs)
        })
        .collect()
}

/// Every character the generators can emit.
pub fn alphabet() -> String {
    let mut s: String = ('a'..='z').collect();
    s.push_str(" ,.");
    s
}
