//! Multi-head GATv2 message passing over the class graph.
//!
//! Two stages share the same layer type: a text stage starting from the
//! class text embeddings and a multimodal stage starting from the fused
//! visual-text features. Edges point from mined neighbours into a class;
//! every class also attends to itself.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const GAT_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGraph {
    pub num_classes: usize,
    pub names: Vec<String>,
    /// Neighbours feeding into each class, best first.
    pub in_neighbors: Vec<Vec<usize>>,
    pub seen_mask: Vec<bool>,
}

impl ClassGraph {
    /// A graph with no mined edges (self-loops only at use time).
    pub fn isolated(names: Vec<String>, seen_mask: Vec<bool>) -> Self {
        ClassGraph {
            num_classes: names.len(),
            in_neighbors: vec![Vec::new(); names.len()],
            names,
            seen_mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if self.names.len() != c || self.in_neighbors.len() != c || self.seen_mask.len() != c {
            return Err(Error::Config(format!(
                "graph declares {c} classes but has {} names, {} neighbour lists, {} mask entries",
                self.names.len(),
                self.in_neighbors.len(),
                self.seen_mask.len()
            )));
        }
        for (cls, nb) in self.in_neighbors.iter().enumerate() {
            let mut seen = std::collections::HashSet::new();
            for &j in nb {
                if j >= c {
                    return Err(Error::Config(format!("class {cls} has neighbour {j} ≥ {c}")));
                }
                if j == cls {
                    return Err(Error::Config(format!("class {cls} lists itself as a neighbour")));
                }
                if !seen.insert(j) {
                    return Err(Error::Config(format!("class {cls} lists neighbour {j} twice")));
                }
            }
        }
        Ok(())
    }

    pub fn edges(&self) -> Edges {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut offsets = vec![0];
        for (c, nb) in self.in_neighbors.iter().enumerate() {
            src.push(c);
            dst.push(c);
            for &j in nb {
                src.push(c);
                dst.push(j);
            }
            offsets.push(src.len());
        }
        Edges {
            num_nodes: self.num_classes,
            src,
            dst,
            offsets,
        }
    }
}

/// Flattened edge list grouped by receiving node: edge `e` carries
/// `dst[e] → src[e]`, and node `c` owns `offsets[c]..offsets[c+1]`
/// (its self-loop first).
#[derive(Clone, Debug, PartialEq)]
pub struct Edges {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub offsets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtmConfig {
    pub heads: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for AtmConfig {
    fn default() -> Self {
        AtmConfig {
            heads: 4,
            layers: 2,
            seed: 13,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GatHead {
    pub w_left: ParamId,
    pub w_right: ParamId,
    pub a: ParamId,
    pub w_agg: ParamId,
}

#[derive(Clone, Debug)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
}

/// Bias-free `W₂·LeakyReLU(W₁·[x_vis | h_txt])`.
#[derive(Clone, Debug)]
pub struct FusionNet {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Atm {
    pub cfg: AtmConfig,
    pub text_layers: Vec<GatLayer>,
    pub mm_layers: Vec<GatLayer>,
    pub fusion: FusionNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Text,
    Multimodal,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Text => "text",
            Stage::Multimodal => "multimodal",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub stage: Stage,
    pub layer: usize,
    pub head: usize,
    pub c: usize,
    pub j: usize,
    pub alpha: f64,
}

pub fn head_width(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    Ok(d / heads)
}

fn build_layer(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<GatLayer> {
    let dh = head_width(d, heads)?;
    let s = 1.0 / (d as f64).sqrt();
    let heads = (0..heads)
        .map(|m| {
            let p = format!("{prefix}.head{m}");
            GatHead {
                w_left: store.add(format!("{p}.w_left"), Tensor::randn(&[dh, d], s, rng), false),
                w_right: store.add(format!("{p}.w_right"), Tensor::randn(&[dh, d], s, rng), false),
                a: store.add(format!("{p}.a"), Tensor::randn(&[dh], 1.0 / (dh as f64).sqrt(), rng), false),
                // Small aggregation weights keep each layer close to its residual.
                w_agg: store.add(format!("{p}.w_agg"), Tensor::randn(&[dh, d], 0.1 * s, rng), false),
            }
        })
        .collect();
    Ok(GatLayer { heads })
}

impl Atm {
    pub fn build(cfg: AtmConfig, d: usize, store: &mut ParamStore) -> Result<Self> {
        head_width(d, cfg.heads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut text_layers = Vec::new();
        let mut mm_layers = Vec::new();
        for l in 0..cfg.layers {
            text_layers.push(build_layer(store, &format!("atm.text.layer{l}"), d, cfg.heads, &mut rng)?);
        }
        for l in 0..cfg.layers {
            mm_layers.push(build_layer(store, &format!("atm.mm.layer{l}"), d, cfg.heads, &mut rng)?);
        }
        // Visual pass-through at init: W₁ = [I | 0] and W₂ = I, plus small noise.
        let eps = 0.01 / (d as f64).sqrt();
        let mut w1 = Tensor::randn(&[d, 2 * d], eps, &mut rng);
        let mut w2 = Tensor::randn(&[d, d], eps, &mut rng);
        for i in 0..d {
            w1.data_mut()[i * 2 * d + i] += 1.0;
            w2.data_mut()[i * d + i] += 1.0;
        }
        let fusion = FusionNet {
            w1: store.add("atm.fusion.w1", w1, false),
            w2: store.add("atm.fusion.w2", w2, false),
        };
        Ok(Atm {
            cfg,
            text_layers,
            mm_layers,
            fusion,
        })
    }
}

/// `e_{cj} = aᵀ·LeakyReLU(W_left h_c + W_right h_j)` for every edge.
pub fn gatv2_scores<'t>(bound: &Bound<'_, 't>, h: Var<'t>, head: &GatHead, edges: &Edges) -> Result<Var<'t>> {
    let left = h.matmul_t(bound.get(head.w_left))?.gather_rows(&edges.src)?;
    let right = h.matmul_t(bound.get(head.w_right))?.gather_rows(&edges.dst)?;
    let a = bound.get(head.a);
    let dh = a.shape()[0];
    let e = left.add(right)?.leaky_relu(GAT_SLOPE).matmul(a.reshape(&[dh, 1])?)?;
    e.reshape(&[edges.src.len()])
}

/// Softmax of the edge scores within each receiving node.
pub fn attention_normalize<'t>(e: Var<'t>, edges: &Edges) -> Result<Var<'t>> {
    e.segment_softmax(&edges.offsets)
}

/// `LeakyReLU(Σ_j α̂_{cj} W_agg h_j)`.
pub fn head_aggregate<'t>(
    bound: &Bound<'_, 't>,
    h: Var<'t>,
    alpha: Var<'t>,
    head: &GatHead,
    edges: &Edges,
) -> Result<Var<'t>> {
    h.matmul_t(bound.get(head.w_agg))?
        .gather_rows(&edges.dst)?
        .mul_col(alpha)?
        .scatter_add_rows(&edges.src, edges.num_nodes)
        .map(|x| x.leaky_relu(GAT_SLOPE))
}

/// Concatenated heads plus the residual input.
pub fn gat_layer<'t>(
    bound: &Bound<'_, 't>,
    h: Var<'t>,
    layer: &GatLayer,
    edges: &Edges,
    mut record: Option<(&mut Vec<AttentionRecord>, Stage, usize)>,
) -> Result<Var<'t>> {
    let d = h.shape()[1];
    let width = head_width(d, layer.heads.len())?;
    let mut outs = Vec::with_capacity(layer.heads.len());
    for (m, head) in layer.heads.iter().enumerate() {
        let alpha = attention_normalize(gatv2_scores(bound, h, head, edges)?, edges)?;
        if let Some((sink, stage, l)) = record.as_mut() {
            let a = alpha.value();
            for (e, &v) in a.data().iter().enumerate() {
                sink.push(AttentionRecord {
                    stage: *stage,
                    layer: *l,
                    head: m,
                    c: edges.src[e],
                    j: edges.dst[e],
                    alpha: v,
                });
            }
        }
        let out = head_aggregate(bound, h, alpha, head, edges)?;
        debug_assert_eq!(out.shape()[1], width);
        outs.push(out);
    }
    concat_cols(&outs)?.add(h)
}

/// Stacked GAT layers starting from `h0`.
pub fn run_stage<'t>(
    bound: &Bound<'_, 't>,
    h0: Var<'t>,
    layers: &[GatLayer],
    edges: &Edges,
    stage: Stage,
    mut record: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var<'t>> {
    let mut h = h0;
    for (l, layer) in layers.iter().enumerate() {
        let rec = record.as_deref_mut().map(|r| (r, stage, l));
        h = gat_layer(bound, h, layer, edges, rec)?;
    }
    Ok(h)
}

pub fn text_atm<'t>(
    bound: &Bound<'_, 't>,
    atm: &Atm,
    t: Var<'t>,
    edges: &Edges,
    record: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var<'t>> {
    run_stage(bound, t, &atm.text_layers, edges, Stage::Text, record)
}

pub fn mm_atm<'t>(
    bound: &Bound<'_, 't>,
    atm: &Atm,
    x_mm: Var<'t>,
    edges: &Edges,
    record: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var<'t>> {
    run_stage(bound, x_mm, &atm.mm_layers, edges, Stage::Multimodal, record)
}

pub fn fuse<'t>(bound: &Bound<'_, 't>, net: &FusionNet, x_vis: Var<'t>, h_txt: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = (x_vis.shape(), h_txt.shape());
    if a != b {
        return Err(Error::dim("fuse", &a, &b));
    }
    concat_cols(&[x_vis, h_txt])?
        .matmul_t(bound.get(net.w1))?
        .leaky_relu(GAT_SLOPE)
        .matmul_t(bound.get(net.w2))
}

/// CSV with header `stage,layer,head,c,j,alpha`.
pub fn attention_csv(records: &[AttentionRecord]) -> String {
    let mut s = String::from("stage,layer,head,c,j,alpha\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.17e}",
            r.stage.as_str(),
            r.layer,
            r.head,
            r.c,
            r.j,
            r.alpha
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn graph(nb: Vec<Vec<usize>>) -> ClassGraph {
        let c = nb.len();
        ClassGraph {
            num_classes: c,
            names: (0..c).map(|i| format!("c{i}")).collect(),
            in_neighbors: nb,
            seen_mask: vec![true; c],
        }
    }

    #[test]
    fn validation_rejects_bad_graphs() {
        assert!(graph(vec![vec![1], vec![]]).validate().is_ok());
        assert!(graph(vec![vec![0], vec![]]).validate().is_err());
        assert!(graph(vec![vec![1, 1], vec![]]).validate().is_err());
        assert!(graph(vec![vec![2], vec![]]).validate().is_err());
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut store = ParamStore::new();
        assert!(matches!(
            Atm::build(AtmConfig { heads: 3, ..Default::default() }, 32, &mut store),
            Err(Error::Config(_))
        ));
        let atm = Atm::build(AtmConfig::default(), 32, &mut store).unwrap();
        assert_eq!(store.value(atm.text_layers[0].heads[0].w_left).shape(), &[8, 32]);
    }

    #[test]
    fn normalize_examples() {
        let tape = Tape::new();
        let g = graph(vec![vec![], vec![2, 3], vec![0], vec![]]);
        let edges = g.edges();
        let e = tape.constant(Tensor::vector(vec![5.0, 2.0, 1.0, 0.0, 0.7, 0.7, -3.0]));
        let a = attention_normalize(e, &edges).unwrap().value();
        assert_eq!(a.data()[0], 1.0);
        let expect = [0.66524, 0.24473, 0.09003];
        for k in 0..3 {
            assert!((a.data()[1 + k] - expect[k]).abs() < 1e-5);
        }
        assert_eq!(a.data()[4], 0.5);
        assert_eq!(a.data()[5], 0.5);
        assert_eq!(a.data()[6], 1.0);
    }

    #[test]
    fn zero_params_are_identity_and_fusion_zero() {
        let mut store = ParamStore::new();
        let atm = Atm::build(AtmConfig { heads: 2, layers: 2, seed: 1 }, 4, &mut store).unwrap();
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(&shape);
        }
        let g = graph(vec![vec![1, 2], vec![0], vec![]]);
        let edges = g.edges();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        assert_eq!(text_atm(&bound, &atm, t, &edges, None).unwrap().value(), t.value());
        assert_eq!(mm_atm(&bound, &atm, t, &edges, None).unwrap().value(), t.value());
        let fused = fuse(&bound, &atm.fusion, t, t).unwrap().value();
        assert!(fused.data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(matches!(fuse(&bound, &atm.fusion, t, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn attention_records_cover_edges() {
        let mut store = ParamStore::new();
        let atm = Atm::build(AtmConfig::default(), 8, &mut store).unwrap();
        let g = graph(vec![vec![1, 2], vec![0], vec![]]);
        let edges = g.edges();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let mut rec = Vec::new();
        mm_atm(&bound, &atm, x, &edges, Some(&mut rec)).unwrap();
        assert_eq!(rec.len(), 2 * 4 * edges.src.len());
        let csv = attention_csv(&rec);
        assert_eq!(csv.lines().count(), rec.len() + 1);
        assert!(csv.starts_with("stage,layer,head,c,j,alpha\nmultimodal,0,0,0,0,"));
    }
}
