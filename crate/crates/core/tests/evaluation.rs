use coad_core::corpus::{generate_synthetic, SyntheticConfig};
use coad_core::dialogue::{DialogueConfig, StopMode};
use coad_core::evaluation::{
    combined_score, evaluate, run_experiment, ExperimentConfig, Protocol, RecallMode,
};
use coad_core::training::{train_as, TrainConfig, Variant};
use proptest::prelude::*;

fn small_corpus() -> coad_core::corpus::Corpus {
    generate_synthetic(&SyntheticConfig {
        n_train: 60,
        n_test: 20,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        hidden: 16,
        ff: 32,
        steps: 30,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn one_budget_gives_one_row_per_variant_and_reruns_identically() {
    let corpus = small_corpus();
    let cfg = ExperimentConfig {
        variants: Variant::ALL.to_vec(),
        seeds: vec![1, 2],
        train: quick_train(),
        protocols: vec![Protocol {
            mode: StopMode::Limited,
            budgets: vec![20],
        }],
        recall: RecallMode::AllImplicit,
    };
    let a = run_experiment(&corpus, &cfg).unwrap();
    assert_eq!(a.cells.len(), 4);
    let table = a.table();
    assert_eq!(table.lines().count(), 2 + 4, "{table}");
    for c in &a.cells {
        assert_eq!(
            c.per_seed.iter().map(|s| s.seed).collect::<Vec<_>>(),
            [1, 2]
        );
        assert!((0.0..=1.0).contains(&c.accuracy) && (0.0..=1.0).contains(&c.recall));
        assert!(c.avg_turns <= 20.0);
    }
    let json = serde_json::to_string_pretty(&a).unwrap();
    let b = run_experiment(&corpus, &cfg).unwrap();
    assert_eq!(json, serde_json::to_string_pretty(&b).unwrap());
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    let cell = &value["cells"][0];
    for key in [
        "variant", "mode", "T_max", "Ac", "Rc", "Cs", "T", "per_seed",
    ] {
        assert!(cell.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn fixed_grid_has_a_cell_per_budget() {
    let corpus = small_corpus();
    let cfg = ExperimentConfig {
        variants: vec![Variant::Full],
        seeds: vec![3],
        train: quick_train(),
        protocols: vec![Protocol {
            mode: StopMode::Fixed,
            budgets: vec![5, 10, 15],
        }],
        recall: RecallMode::AllImplicit,
    };
    let r = run_experiment(&corpus, &cfg).unwrap();
    for t in [5, 10, 15] {
        let c = r.cell(Variant::Full, StopMode::Fixed, t).unwrap();
        assert_eq!(c.avg_turns, t as f64);
    }
}

#[test]
fn recall_never_drops_as_the_limit_grows() {
    // Greedy decoding makes a longer budget extend the shorter episode.
    let corpus = small_corpus();
    let model = train_as::<f32>(&corpus, &quick_train(), None)
        .unwrap()
        .model;
    let mut last = 0.0;
    for t in 0..=12 {
        let cfg = DialogueConfig {
            max_turns: t,
            mode: StopMode::Limited,
        };
        let r = evaluate(&model, &corpus.test, cfg, RecallMode::AllImplicit).unwrap();
        assert!(r.recall >= last, "T_max {t}: {} < {last}", r.recall);
        assert!(r.max_turns <= t);
        last = r.recall;
    }
}

#[test]
fn empty_test_split_is_an_error() {
    let corpus = small_corpus();
    let model = train_as::<f32>(
        &corpus,
        &TrainConfig {
            steps: 1,
            ..quick_train()
        },
        None,
    )
    .unwrap()
    .model;
    assert!(evaluate(
        &model,
        &[],
        DialogueConfig::default(),
        RecallMode::AllImplicit
    )
    .is_err());
}

proptest! {
    #[test]
    fn combined_score_is_a_bounded_harmonic_mean(ac in 0.0f64..=1.0, rc in 0.0f64..=1.0) {
        let cs = combined_score(ac, rc);
        prop_assert!(cs >= ac.min(rc) - 1e-12 && cs <= ac.max(rc) + 1e-12);
        prop_assert!((combined_score(ac, ac) - ac).abs() < 1e-12);
        prop_assert_eq!(combined_score(ac, 0.0), 0.0);
        prop_assert!((cs - combined_score(rc, ac)).abs() < 1e-15);
    }
}
