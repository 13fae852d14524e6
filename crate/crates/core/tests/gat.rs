//! Graph attention layers against a dense loop oracle.

use ovmlr_core::atm::{run_stage, text_atm, Atm, AtmConfig, AttentionRecord, ClassGraph, Stage};
use ovmlr_core::autodiff::Tape;
use ovmlr_core::params::ParamStore;
use ovmlr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;
use support::{dense_layer, random_graph, randomize};

#[test]
fn layers_match_dense_oracle_and_rows_normalise() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..60 {
        let n = rng.gen_range(1..=5);
        let heads = [1, 2, 4][trial % 3];
        let d = 4 * rng.gen_range(1..=2);
        let g = random_graph(n, &mut rng);
        let mut store = ParamStore::new();
        let atm = Atm::build(AtmConfig { heads, layers: 2, seed: trial as u64 }, d, &mut store).unwrap();
        randomize(&mut store, &mut rng);
        let h0 = Tensor::randn(&[n, d], 1.0, &mut rng);

        let tape = Tape::new();
        let bound = store.bind(&tape);
        let mut rec: Vec<AttentionRecord> = Vec::new();
        let got = text_atm(&bound, &atm, tape.constant(h0.clone()), &g.edges(), Some(&mut rec))
            .unwrap()
            .value();
        let mut want = h0;
        for layer in &atm.text_layers {
            want = dense_layer(&store, layer, &want, &g);
        }
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }

        for l in 0..2 {
            for m in 0..heads {
                for c in 0..n {
                    let rows: Vec<&AttentionRecord> = rec
                        .iter()
                        .filter(|r| r.stage == Stage::Text && r.layer == l && r.head == m && r.c == c)
                        .collect();
                    assert_eq!(rows.len(), 1 + g.in_neighbors[c].len());
                    let s: f64 = rows.iter().map(|r| r.alpha).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn zero_parameters_give_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_graph(5, &mut rng);
    let mut store = ParamStore::new();
    let atm = Atm::build(AtmConfig::default(), 8, &mut store).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
    let h0 = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = run_stage(&bound, tape.constant(h0.clone()), &atm.mm_layers, &g.edges(), Stage::Multimodal, None)
        .unwrap()
        .value();
    assert_eq!(out, h0);
}

/// Two nodes with the same candidate set prefer different neighbours,
/// which a query-independent ranking could not produce.
#[test]
fn attention_ranking_depends_on_the_query() {
    let g = ClassGraph {
        num_classes: 3,
        names: vec!["a".into(), "b".into(), "c".into()],
        in_neighbors: vec![vec![1, 2], vec![0, 2], vec![]],
        seen_mask: vec![true; 3],
    };
    let mut store = ParamStore::new();
    let atm = Atm::build(AtmConfig { heads: 1, layers: 1, seed: 0 }, 2, &mut store).unwrap();
    let head = &atm.text_layers[0].heads[0];
    *store.value_mut(head.w_left) = Tensor::eye(2);
    *store.value_mut(head.w_right) = Tensor::eye(2);
    *store.value_mut(head.a) = Tensor::vector(vec![1.0, 1.0]);
    let h = Tensor::from_rows(&[[5.0, -5.0], [-5.0, 5.0], [0.0, 0.0]]);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let mut rec = Vec::new();
    text_atm(&bound, &atm, tape.constant(h), &g.edges(), Some(&mut rec)).unwrap();
    let best = |c: usize| {
        rec.iter()
            .filter(|r| r.c == c)
            .max_by(|a, b| a.alpha.total_cmp(&b.alpha))
            .map(|r| r.j)
            .unwrap()
    };
    assert_eq!(best(0), 0);
    assert_eq!(best(1), 1);
}
