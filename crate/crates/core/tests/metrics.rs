mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ratlab::eval::{bleu, char_f1, emit_report, exact_accuracy, forgetting_delta, Layout, Metric, MetricResult, ReportEntry};

#[test]
fn bleu_agrees_with_longhand_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let alphabet: Vec<char> = "abcde ".chars().collect();
    let mut checked = 0;
    while checked < 100 {
        let pred = common::random_string(&mut rng, &alphabet, 20);
        let gold = common::random_string(&mut rng, &alphabet, 20);
        if gold.is_empty() {
            continue;
        }
        let got = bleu(&pred, &gold, 4).unwrap();
        let want = common::bleu_oracle(&pred, &gold);
        assert!((got - want).abs() <= 1e-9, "{pred:?} / {gold:?}: {got} vs {want}");
        checked += 1;
    }
}

#[test]
fn bleu_edge_cases() {
    assert_eq!(bleu("abcdef", "abcdef", 4).unwrap(), 1.0);
    assert_eq!(bleu("", "abc", 4).unwrap(), 0.0);
    assert_eq!(bleu("xyz", "abc", 4).unwrap(), 0.0);
    assert!(bleu("abc", "", 4).is_err());
    assert!(bleu("abc", "abc", 0).is_err());
    let short = bleu("ab", "abcdefgh", 4).unwrap();
    assert!(short > 0.0 && short < bleu("abcdefg", "abcdefgh", 4).unwrap());
}

#[test]
fn f1_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alphabet: Vec<char> = "abc".chars().collect();
    for _ in 0..200 {
        let a = common::random_string(&mut rng, &alphabet, 10);
        let b = common::random_string(&mut rng, &alphabet, 10);
        let f = char_f1(&a, &b);
        assert!((0.0..=1.0).contains(&f));
        assert_eq!(f, char_f1(&b, &a));
        assert_eq!(char_f1(&a, &a), 1.0);
        let mut shuffled: Vec<char> = a.chars().collect();
        shuffled.reverse();
        assert_eq!(char_f1(&shuffled.iter().collect::<String>(), &a), 1.0);
    }
    assert_eq!(char_f1("", "a"), 0.0);
    assert_eq!(char_f1("", ""), 1.0);
}

#[test]
fn accuracy_display_rounds_to_two_decimals() {
    let gold = vec!["ok"; 30];
    let mut pred = gold.clone();
    pred[7] = "no";
    let acc = exact_accuracy(&pred, &gold).unwrap();
    let r = MetricResult::new("t", Metric::Accuracy, acc, 30).unwrap();
    assert_eq!(r.display_value(), "96.67");
    assert_eq!(MetricResult::new("t", Metric::Bleu, 0.5, 1).unwrap().display_value(), "50.00");
    assert!(MetricResult::new("t", Metric::Ppl, 0.5, 1).is_err());
    assert!(MetricResult::new("t", Metric::F1, 1.5, 1).is_err());
}

#[test]
fn forgetting_delta_sign_follows_direction() {
    let r = |m, v| MetricResult::new("t", m, v, 4).unwrap();
    assert_eq!(forgetting_delta(&r(Metric::Ppl, 3.0), &r(Metric::Ppl, 4.5)).unwrap(), 1.5);
    assert_eq!(forgetting_delta(&r(Metric::Accuracy, 80.0), &r(Metric::Accuracy, 70.0)).unwrap(), 10.0);
    assert!((forgetting_delta(&r(Metric::Bleu, 0.2), &r(Metric::Bleu, 0.3)).unwrap() + 0.1).abs() < 1e-12);
    let other = MetricResult::new("u", Metric::Ppl, 2.0, 4).unwrap();
    assert!(forgetting_delta(&r(Metric::Ppl, 2.0), &other).is_err());
    assert!(forgetting_delta(&r(Metric::Ppl, 2.0), &r(Metric::Accuracy, 2.0)).is_err());
}

fn entry(row: &str, task: &str, metric: Metric, v: f64) -> ReportEntry {
    ReportEntry::new(row, MetricResult::new(task, metric, v, 10).unwrap())
}

#[test]
fn reports_are_byte_stable_and_reject_gaps() {
    let entries = vec![
        entry("FT", "a", Metric::Ppl, 2.5),
        entry("FT", "b", Metric::Ppl, 3.25),
        entry("RAT", "a", Metric::Ppl, 2.0),
        entry("RAT", "b", Metric::Ppl, 3.0),
    ];
    for layout in [Layout::Table5, Layout::Table4, Layout::Plain] {
        let x = emit_report(&entries, layout).unwrap();
        let y = emit_report(&entries, layout).unwrap();
        assert_eq!(x.markdown, y.markdown);
        assert_eq!(x.csv, y.csv);
    }
    let t5 = emit_report(&entries, Layout::Table5).unwrap();
    assert!(t5.markdown.contains("| RAT | 2.00 | 3.00 | 2.50 |"), "{}", t5.markdown);

    let gap = &entries[..3];
    let err = emit_report(gap, Layout::Table5).unwrap_err().to_string();
    assert!(err.contains("RAT/b"), "{err}");
    assert!(emit_report(&[entry("x", "a", Metric::Ppl, 2.0)], Layout::Table6).is_err());
}

#[test]
fn table6_orders_rows_numerically() {
    let entries = vec![
        entry("16", "a", Metric::F1, 0.5),
        entry("4", "a", Metric::F1, 0.25),
        entry("8", "a", Metric::F1, 0.75),
    ];
    let md = emit_report(&entries, Layout::Table6).unwrap().markdown;
    let p4 = md.find("| 4 |").unwrap();
    let p8 = md.find("| 8 |").unwrap();
    let p16 = md.find("| 16 |").unwrap();
    assert!(p4 < p8 && p8 < p16);
}
