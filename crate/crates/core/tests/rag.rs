mod common;

use common::{ScriptedReader, PLAIN_ANSWER};
use proptest::prelude::*;
use ratlab::rag::synth::{author_questions, field, knowledge_base};
use ratlab::rag::{
    answer_with_rag, detect_retrieval_call, read_kb, truncate_key, write_kb, KVIndex, MissPolicy, RagOptions, TaskTag,
    TruncatedKey, DEFAULT_K,
};

#[test]
fn truncated_titles_retrieve_their_record_first() {
    let kb = knowledge_base(1000, DEFAULT_K, 42).unwrap();
    let index = KVIndex::build(kb.clone()).unwrap();
    for (i, r) in kb.iter().enumerate() {
        let title = r.key("title").unwrap();
        let got = index.retrieve_str(title, DEFAULT_K, TaskTag::AuthorRetrieval, 16).unwrap();
        assert_eq!(got.hits[0].record_index, i, "{title}");
        assert_eq!(got.total_matches, 1);
    }
}

#[test]
fn scripted_reader_answers_every_author_question() {
    let kb = knowledge_base(300, DEFAULT_K, 7).unwrap();
    let index = KVIndex::build(kb.clone()).unwrap();
    let reader = ScriptedReader { k: DEFAULT_K };
    let questions = author_questions(&kb);
    assert_eq!(questions.len(), 300);
    for q in &questions {
        let a = answer_with_rag(&reader, &index, &q.query, &RagOptions::default()).unwrap();
        assert_eq!(a.answer, q.response);
        assert_eq!(a.passes.len(), 2);
        assert!(!a.no_evidence);
    }
}

#[test]
fn non_knowledge_queries_take_one_pass() {
    let index = KVIndex::build(knowledge_base(20, DEFAULT_K, 1).unwrap()).unwrap();
    let reader = ScriptedReader { k: DEFAULT_K };
    for q in ["add commas to this", "translate abc", "who is there"] {
        let a = answer_with_rag(&reader, &index, q, &RagOptions::default()).unwrap();
        assert_eq!(a.answer, PLAIN_ANSWER);
        assert_eq!(a.passes.len(), 1);
        assert!(a.call.is_none());
    }
}

#[test]
fn unknown_title_follows_miss_policy() {
    let index = KVIndex::build(knowledge_base(20, DEFAULT_K, 1).unwrap()).unwrap();
    let reader = ScriptedReader { k: DEFAULT_K };
    let q = "who wrote zzzz qqqq xxxx yyyy?";
    let a = answer_with_rag(&reader, &index, q, &RagOptions::default()).unwrap();
    assert!(a.no_evidence);
    assert_eq!(a.passes.len(), 1);
    let strict = RagOptions {
        on_miss: MissPolicy::Error,
        ..RagOptions::default()
    };
    assert!(answer_with_rag(&reader, &index, q, &strict).is_err());
}

#[test]
fn knowledge_base_file_round_trip() {
    let kb = knowledge_base(50, DEFAULT_K, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kb.jsonl");
    write_kb(&path, &kb).unwrap();
    let back = read_kb(&path).unwrap();
    assert_eq!(back, kb);
    let a = KVIndex::build(kb).unwrap();
    let b = KVIndex::build(back).unwrap();
    assert_eq!(a.signature(), b.signature());
}

#[test]
fn calls_parse_back_to_the_same_key() {
    let kb = knowledge_base(30, DEFAULT_K, 5).unwrap();
    let reader = ScriptedReader { k: DEFAULT_K };
    for r in &kb {
        let title = r.key("title").unwrap();
        let out = ratlab::rag::Reader::read(&reader, &format!("who wrote {title}?")).unwrap();
        let call = detect_retrieval_call(&out).unwrap().unwrap();
        assert_eq!(call.task, TaskTag::AuthorRetrieval);
        assert_eq!(*call.primary(), truncate_key(title, DEFAULT_K).unwrap());
        assert!(call.primary().matches(title));
        assert_eq!(field(r.value(), "title"), Some(title));
    }
}

proptest! {
    #[test]
    fn truncation_round_trips_and_matches(key in "[a-z ]{1,40}", k in 1usize..12) {
        let t = truncate_key(&key, k).unwrap();
        prop_assert!(t.matches(&key));
        let rendered = t.render();
        let parsed: TruncatedKey = rendered.parse().unwrap();
        prop_assert_eq!((&parsed.prefix, &parsed.suffix, parsed.elided), (&t.prefix, &t.suffix, t.elided));
        prop_assert!(parsed.matches(&key));
        if key.chars().count() <= 2 * k {
            prop_assert!(!t.elided);
            prop_assert_eq!(rendered, key);
        }
    }
}
