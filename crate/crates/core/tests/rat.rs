mod common;

use proptest::prelude::*;
use ratlab::lm::{layer_of, TrainConfig, Trainable};
use ratlab::nn::AdamWConfig;
use ratlab::rat::{apply_plan, partition_groups, plan_from_calibration, redundancy_profile, select_trainable, RedundancyProfile};

#[test]
fn profile_matches_trace_oracle() {
    for seed in 0..5 {
        let mut model = common::model(4, 16, 2, seed);
        common::jitter(&mut model, 0.05, seed);
        let calib = common::calibration(&model.tokenizer, 8, seed);
        let profile = redundancy_profile(&model, &calib).unwrap();
        let traces: Vec<_> = calib
            .samples()
            .iter()
            .map(|s| model.forward(s, true).unwrap().1.unwrap())
            .collect();
        let oracle = common::profile_oracle(&traces);
        for (a, b) in profile.scores.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-6, "seed {seed}: {a} vs {b}");
        }
        assert_eq!(profile.sample_count, 8);
    }
}

#[test]
fn identity_layer_scores_one() {
    let mut model = common::model(4, 16, 2, 3);
    model.make_identity_layer(2).unwrap();
    let calib = common::calibration(&model.tokenizer, 4, 3);
    let p = redundancy_profile(&model, &calib).unwrap();
    assert!((p.scores[1] - 1.0).abs() < 1e-12);
    let (_, plan) = plan_from_calibration(&model, &calib, 1).unwrap();
    assert_eq!(plan.selected(), &[2]);
}

#[test]
fn profile_is_deterministic() {
    let model = common::model(4, 16, 2, 9);
    let calib = common::calibration(&model.tokenizer, 6, 9);
    let a = redundancy_profile(&model, &calib).unwrap();
    let b = redundancy_profile(&model, &calib).unwrap();
    assert!(a.scores.iter().zip(&b.scores).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn over_length_calibration_is_rejected() {
    let model = common::model(2, 8, 2, 0);
    let long = vec![5; model.config.max_seq_len + 1];
    let calib = ratlab::rat::CalibrationSet::new(vec![long], "long", 0).unwrap();
    assert!(matches!(redundancy_profile(&model, &calib), Err(ratlab::Error::Range(_))));
}

#[test]
fn only_selected_layers_move_during_training() {
    for (n_layers, n) in [(8, 2), (8, 8), (12, 4)] {
        let mut model = common::model(n_layers, 8, 2, n as u64);
        let calib = common::calibration(&model.tokenizer, 4, 1);
        let (_, plan) = plan_from_calibration(&model, &calib, n).unwrap();
        apply_plan(&mut model, &plan).unwrap();
        let before = model.params.clone();
        let data = common::random_sequences(&model.tokenizer, 16, 16, 2);
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 4,
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        };
        model.train(&data, &Trainable::Installed, &cfg).unwrap();
        let changed = model.params.changed_since(&before);
        assert!(!changed.is_empty());
        for name in &changed {
            let layer = layer_of(name).expect("only block parameters may change");
            assert!(plan.selected().contains(&layer), "{name} moved");
        }
        let moved: std::collections::BTreeSet<usize> = changed.iter().filter_map(|n| layer_of(n)).collect();
        assert_eq!(moved.len(), n);
    }
}

proptest! {
    #[test]
    fn partition_tiles_layers(n_layers in 1usize..64, n in 1usize..64) {
        prop_assume!(n <= n_layers);
        let groups = partition_groups(n_layers, n).unwrap();
        prop_assert_eq!(groups.len(), n);
        prop_assert_eq!(*groups[0].start(), 1);
        prop_assert_eq!(*groups[n - 1].end(), n_layers);
        for w in groups.windows(2) {
            prop_assert_eq!(*w[0].end() + 1, *w[1].start());
            let (a, b) = (w[0].clone().count(), w[1].clone().count());
            prop_assert!(a == b || a == b + 1);
        }
    }

    #[test]
    fn selection_is_group_argmax(scores in proptest::collection::vec(-1.0f64..1.0, 2..24), n in 1usize..8) {
        prop_assume!(n <= scores.len());
        let profile = RedundancyProfile { scores: scores.clone(), sample_count: 1, excluded_timesteps: 0 };
        let groups = partition_groups(scores.len(), n).unwrap();
        let plan = select_trainable(&profile, &groups).unwrap();
        for (g, &sel) in groups.iter().zip(plan.selected()) {
            prop_assert!(g.contains(&sel));
            let best = g.clone().map(|l| scores[l - 1]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(scores[sel - 1], best);
            let first = g.clone().find(|&l| scores[l - 1] == best).unwrap();
            prop_assert_eq!(sel, first);
        }
    }
}

#[test]
fn too_many_groups_is_an_error() {
    assert!(partition_groups(4, 5).is_err());
    assert!(partition_groups(4, 0).is_err());
}
