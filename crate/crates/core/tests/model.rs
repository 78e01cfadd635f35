mod common;

use coad_core::augmentation::{expand_record, AugmentConfig};
use coad_core::corpus::{PrefixIndex, Vocab};
use coad_core::model::{CoadModel, ModelConfig, ModelInput};
use coad_tensor::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 4,
        ff: 24,
        dropout: 0.0,
        max_len: 32,
        ..ModelConfig::small(vocab)
    }
}

fn rows(g: &Graph<'_, f64>, v: coad_tensor::Var, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| g.value(v).row(i).to_vec()).collect()
}

#[test]
fn swapping_probes_within_a_group_leaves_anchors_alone() {
    let vocab = Vocab::numbered(12, 3);
    let model = CoadModel::<f64>::new(config(&vocab), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for r in common::random_records(&mut rng, 30, 3, 6, 12) {
        let s = expand_record(
            &r,
            &PrefixIndex::build(std::slice::from_ref(&r)),
            AugmentConfig::default(),
        );
        let p = s.prefix_len();
        // The first two members of group 0 are both probes when M >= 3.
        if s.n_implicit < 3 {
            continue;
        }
        let base = ModelInput::repeated(&s);
        let mut swapped = base.clone();
        swapped.tokens.swap(p, p + 1);
        swapped.statuses.swap(p, p + 1);
        swapped.tokens[p] = (swapped.tokens[p] + 5) % 12;
        let anchors: Vec<usize> = (0..p).chain(s.anchors.iter().map(|a| p + a)).collect();
        let mut g1 = Graph::new(false, 0);
        let a = model.forward(&mut g1, &base).unwrap();
        let mut g2 = Graph::new(false, 0);
        let b = model.forward(&mut g2, &swapped).unwrap();
        assert_eq!(rows(&g1, a.hidden, &anchors), rows(&g2, b.hidden, &anchors));
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn heads_are_independent() {
    let vocab = Vocab::numbered(9, 4);
    let model = CoadModel::<f64>::new(config(&vocab), 8).unwrap();
    let input = ModelInput::causal(vec![1, 4, 2], vec![1, 2, 1]);
    let logits = |m: &CoadModel<f64>| {
        let mut g = Graph::new(false, 0);
        let out = m.forward(&mut g, &input).unwrap();
        (
            g.value(out.symptom_logits).data().to_vec(),
            g.value(out.disease_logits).data().to_vec(),
        )
    };
    let (s0, d0) = logits(&model);
    for (head, keep_symptom) in [("disease_head", true), ("symptom_head", false)] {
        let mut m = model.clone();
        let names: Vec<String> = m.param_names().to_vec();
        for (name, p) in names.iter().zip(m.params_mut()) {
            if name.starts_with(head) {
                p.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let (s, d) = logits(&m);
        if keep_symptom {
            assert_eq!(s, s0);
            assert_ne!(d, d0);
        } else {
            assert_eq!(d, d0);
            assert_ne!(s, s0);
        }
    }
}

#[test]
fn forward_is_deterministic_without_dropout() {
    let vocab = Vocab::numbered(9, 4);
    let model = CoadModel::<f64>::new(
        ModelConfig {
            dropout: 0.3,
            ..config(&vocab)
        },
        8,
    )
    .unwrap();
    let input = ModelInput::causal(vec![1, 4, 2, 7], vec![1, 2, 1, 1]);
    let run = |seed| {
        let mut g = Graph::new(false, seed);
        let out = model.forward(&mut g, &input).unwrap();
        g.value(out.hidden).data().to_vec()
    };
    assert_eq!(run(1), run(2));
}
