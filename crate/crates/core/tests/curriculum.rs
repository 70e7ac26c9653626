mod common;

use ratlab::curriculum::synth::{alphabet, punctuation_samples, translation_samples};
use ratlab::curriculum::{
    build_calibration, n_ablation, run_stage, run_two_stage, sample_indices, validate_calibration_provenance, Corpus,
    Method, StageConfig, TwoStageConfig,
};
use ratlab::eval::{EvalOptions, EvalTask, Metric};
use ratlab::lm::{ModelConfig, TinyLm, Tokenizer};
use ratlab::sample::write_jsonl;

fn synth_model(seed: u64) -> TinyLm {
    let tok = Tokenizer::from_chars(alphabet().chars().collect());
    let cfg = ModelConfig {
        n_layers: 4,
        d_model: 16,
        n_heads: 2,
        vocab_size: tok.vocab_size(),
        max_seq_len: 96,
    };
    TinyLm::new(cfg, tok, seed).unwrap()
}

fn eval_set() -> Vec<(EvalTask, Vec<ratlab::sample::InstructionSample>)> {
    vec![(
        EvalTask {
            task: "translation".into(),
            path: "mem".into(),
            metric: Metric::Ppl,
            knowledge_intensive: false,
        },
        translation_samples(4, 99),
    )]
}

#[test]
fn sparse_sampler_matches_dense_shuffle() {
    for seed in 0..50 {
        for (n, k) in [(10, 10), (100, 7), (1000, 16), (5, 0)] {
            assert_eq!(sample_indices(n, k, seed).unwrap(), common::dense_sample(n, k, seed), "n={n} k={k} seed={seed}");
        }
    }
    assert!(sample_indices(3, 4, 0).is_err());
}

#[test]
fn calibration_keeps_source_order_and_tag() {
    let corpus = Corpus::from_sequences("src", (0..20).map(|i| vec![1, 5 + i % 3, 2]).collect());
    let calib = build_calibration(&corpus, 5, 3).unwrap();
    let idx = sample_indices(20, 5, 3).unwrap();
    let expect: Vec<_> = idx.iter().map(|&i| corpus.items[i].clone()).collect();
    assert_eq!(calib.samples(), expect.as_slice());
    assert!(build_calibration(&corpus, 21, 3).is_err());
    assert!(build_calibration(&corpus, 0, 3).is_err());
}

#[test]
fn stage_two_calibration_must_come_from_stage_one() {
    let a = Corpus::from_sequences("a", vec![vec![1, 4, 2]]);
    let b = Corpus::from_sequences("b", vec![vec![1, 5, 2]]);
    let c = Corpus::from_sequences("c", vec![vec![1, 6, 2]]);
    assert!(validate_calibration_provenance(&a, &a, &b).is_ok());
    assert!(validate_calibration_provenance(&a, &b, &b).is_err());
    assert!(validate_calibration_provenance(&a, &c, &b).is_err());
    let a_renamed = Corpus::from_sequences("elsewhere", a.items.clone());
    assert!(validate_calibration_provenance(&a, &a_renamed, &b).is_ok());
}

#[test]
fn rat_stage_trains_only_planned_layers() {
    let mut model = synth_model(1);
    let before = model.params.clone();
    let tok = model.tokenizer.clone();
    let train = Corpus::from_samples("t", &translation_samples(24, 1), &tok);
    let stage = StageConfig {
        n_groups: 2,
        steps: 5,
        calibration_size: 4,
        ..StageConfig::new(1, "t", "t")
    };
    let report = run_stage(&mut model, &stage, &train, &train, &eval_set(), &EvalOptions::default()).unwrap();
    let plan = report.plan.clone().unwrap();
    assert_eq!(plan.selected().len(), 2);
    for name in model.params.changed_since(&before) {
        assert!(plan.selected().contains(&ratlab::lm::layer_of(&name).unwrap()));
    }
    assert_eq!(report.eval_before.len(), 1);
    assert_eq!(report.eval_after.len(), 1);
    assert_eq!(report.params_after, model.params.content_hash());
}

#[test]
fn two_stage_run_reports_forgetting_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_jsonl(&a, &translation_samples(16, 2)).unwrap();
    write_jsonl(&b, &punctuation_samples(16, 3)).unwrap();
    let stage = |id, train: &std::path::Path, calib: &std::path::Path| StageConfig {
        n_groups: 2,
        steps: 4,
        calibration_size: 4,
        method: Method::Rat,
        ..StageConfig::new(id, train, calib)
    };
    let cfg = TwoStageConfig {
        stage1: stage(1, &a, &a),
        stage2: stage(2, &b, &a),
        forgetting_tasks: vec!["translation".into()],
    };
    let run = || {
        let mut m = synth_model(5);
        let out = run_two_stage(&mut m, &cfg, &eval_set(), &EvalOptions::default(), None).unwrap();
        (m.params.content_hash(), out.forgetting)
    };
    let (h1, f1) = run();
    let (h2, f2) = run();
    assert_eq!(h1, h2);
    assert_eq!(f1, f2);
    assert_eq!(f1.entries.len(), 1);
    let e = &f1.entries[0];
    assert!((e.delta - (e.after - e.before)).abs() < 1e-12);

    let bad = TwoStageConfig {
        stage2: stage(2, &b, &b),
        ..cfg.clone()
    };
    let mut m = synth_model(5);
    assert!(run_two_stage(&mut m, &bad, &eval_set(), &EvalOptions::default(), None).is_err());
}

#[test]
fn ablation_runs_each_n_from_the_same_base() {
    let base = synth_model(8);
    let tok = base.tokenizer.clone();
    let train = Corpus::from_samples("t", &translation_samples(16, 4), &tok);
    let stage = StageConfig {
        steps: 3,
        calibration_size: 4,
        ..StageConfig::new(1, "t", "t")
    };
    let run = || n_ablation(&base, &stage, &[1, 2, 4], &train, &train, &eval_set(), &EvalOptions::default()).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.reports.len(), 3);
    for (r, n) in a.reports.iter().zip([1, 2, 4]) {
        assert_eq!(r.plan.as_ref().unwrap().selected().len(), n);
        assert_eq!(r.params_before, base.params.content_hash());
    }
    assert_eq!(a.table.markdown, b.table.markdown);
}
