//! Brute-force oracles shared by the test targets.
#![allow(dead_code)]

use ovmlr_core::atm::{ClassGraph, GatLayer};
use ovmlr_core::metrics::EvalTable;
use ovmlr_core::params::ParamStore;
use ovmlr_core::Tensor;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Precision at the rank of every positive, counted by comparisons only.
pub fn brute_ap(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| truth[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &p in &pos {
        let above = (0..scores.len()).filter(|&j| scores[j] >= scores[p]).count();
        let pos_above = pos.iter().filter(|&&j| scores[j] >= scores[p]).count();
        sum += pos_above as f64 / above as f64;
    }
    Some(sum / pos.len() as f64)
}

/// `(tp, predicted, positives)` with label j predicted iff fewer than k labels beat it.
pub fn brute_counts(scores: &[f64], truth: &[bool], k: usize) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut pred = 0;
    for j in 0..scores.len() {
        let beaten_by = scores.iter().filter(|&&s| s > scores[j]).count();
        if beaten_by < k {
            pred += 1;
            tp += truth[j] as usize;
        }
    }
    (tp, pred, truth.iter().filter(|&&t| t).count())
}

pub fn random_table(rng: &mut ChaCha8Rng) -> EvalTable {
    let n = rng.gen_range(1..8);
    let c = rng.gen_range(1..7);
    // Distinct scores: a shuffled ladder, so no tie conventions are involved.
    let mut ladder: Vec<f64> = (0..n * c).map(|i| i as f64 / 7.0 - 1.3).collect();
    ladder.shuffle(rng);
    let truth = (0..n).map(|_| (0..c).map(|_| rng.gen_bool(0.4)).collect()).collect();
    EvalTable::new(Tensor::new(vec![n, c], ladder).unwrap(), truth).unwrap()
}

pub fn lrelu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.2 * x
    }
}

pub fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Direct transcription: per head, scores over {c} ∪ N(c), softmax,
/// weighted sum of `W_agg h_j`, activation; heads concatenated; residual.
pub fn dense_layer(store: &ParamStore, layer: &GatLayer, h: &Tensor, g: &ClassGraph) -> Tensor {
    let (n, d) = (h.rows(), h.cols());
    let mut out = h.clone();
    for c in 0..n {
        let mut nb = vec![c];
        nb.extend(&g.in_neighbors[c]);
        let mut col = 0;
        for head in &layer.heads {
            let (wl, wr, a, wa) = (
                store.value(head.w_left),
                store.value(head.w_right),
                store.value(head.a),
                store.value(head.w_agg),
            );
            let left = mat_vec(wl, h.row(c));
            let e: Vec<f64> = nb
                .iter()
                .map(|&j| {
                    let right = mat_vec(wr, h.row(j));
                    (0..a.len()).map(|k| a.data()[k] * lrelu(left[k] + right[k])).sum()
                })
                .collect();
            let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
            let mut acc = vec![0.0; wa.rows()];
            for (t, &j) in nb.iter().enumerate() {
                let alpha = (e[t] - m).exp() / z;
                for (k, v) in mat_vec(wa, h.row(j)).into_iter().enumerate() {
                    acc[k] += alpha * v;
                }
            }
            for v in acc {
                out.data_mut()[c * d + col] += lrelu(v);
                col += 1;
            }
        }
    }
    out
}

pub fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> ClassGraph {
    let in_neighbors = (0..n)
        .map(|c| {
            let others: Vec<usize> = (0..n).filter(|&j| j != c).collect();
            let k = rng.gen_range(0..=others.len());
            sample(rng, others.len(), k).into_iter().map(|i| others[i]).collect()
        })
        .collect();
    ClassGraph {
        num_classes: n,
        names: (0..n).map(|i| format!("class{i}")).collect(),
        in_neighbors,
        seen_mask: vec![true; n],
    }
}

pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::randn(&shape, 0.7, rng);
    }
}


/// `(tp, predicted, positives)` pooled over the table, then P, R, F1.
pub fn brute_prf(t: &EvalTable, k: usize) -> (f64, f64, f64) {
    let (mut tp, mut pred, mut pos) = (0, 0, 0);
    for i in 0..t.num_images() {
        let (a, b, d) = brute_counts(t.scores.row(i), &t.truth[i], k);
        tp += a;
        pred += b;
        pos += d;
    }
    let p = if pred == 0 { 0.0 } else { tp as f64 / pred as f64 };
    let r = if pos == 0 { 0.0 } else { tp as f64 / pos as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}
