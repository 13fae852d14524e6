//! Model assembly: frozen encoder, refinement pathway, patch selection,
//! graph stages, prediction and the training objective.

use crate::arm::{adapt, Arm};
use crate::atm::{fuse, mm_atm, text_atm, Atm, AttentionRecord, ClassGraph, Edges};
use crate::autodiff::{concat_rows, Tape, Var};
use crate::backbone::{Backbone, BackboneOutput};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{topk_indices, Tensor};
use crate::wps::{self, HardSet};

use super::config::ModelConfig;
use super::data::{PatchBag, Vocabulary};

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub arm: Arm,
    pub atm: Atm,
    /// `d × d` map applied to the global token before it joins `x_vis`.
    pub w_g: ParamId,
    pub vocab: Vocabulary,
    pub graph: ClassGraph,
    pub edges: Edges,
    text: Tensor,
    seen_ids: Vec<usize>,
    text_seen: Tensor,
}

/// Per-image quantities that do not depend on trainable parameters.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: usize,
    pub out: BackboneOutput,
    /// Prior scores `S*` over the seen classes, `N_p × |seen|`.
    pub s_star_seen: Tensor,
    pub labels: Vec<bool>,
    pub labels_seen: Vec<bool>,
}

/// Stop-gradient selections of one image, fixed for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTargets {
    /// Smoothed responsibilities over the seen classes.
    pub z_smooth: Tensor,
    pub hard: Vec<HardSet>,
    /// Top-`K_patch` patch indices per class (all classes).
    pub topk: Vec<Vec<usize>>,
}

pub struct ImageForward<'t> {
    pub yhat: Var<'t>,
    pub s_tilde: Var<'t>,
    pub s_seen: Var<'t>,
    pub delta: Option<Var<'t>>,
    pub x_tilde: Var<'t>,
}

pub struct BatchForward<'t> {
    pub loss: Var<'t>,
    pub l_clsf: Var<'t>,
    pub l_wps: Var<'t>,
    pub l_pen: Var<'t>,
    pub targets: Vec<ImageTargets>,
}

#[derive(Clone, Debug)]
pub struct ImageEval {
    pub id: usize,
    pub yhat: Vec<f64>,
    /// Patch scores `S̃` against every class, `N_p × C`.
    pub s_tilde: Tensor,
    /// Mean `|Δx̃|` over entries (0 without the refinement pathway).
    pub delta_abs_mean: f64,
    pub attention: Vec<AttentionRecord>,
}

/// `x_vis^(c) = Σ_{i∈top-K} softmax(scale·S̃_{·,c})_i x̃^i + W_g x̄`.
pub fn class_attentive_features<'t>(
    x_tilde: Var<'t>,
    s_tilde: Var<'t>,
    global: Var<'t>,
    w_g: Var<'t>,
    topk: &[Vec<usize>],
    scale: f64,
) -> Result<Var<'t>> {
    let mut rows = Vec::with_capacity(topk.len());
    for (c, idx) in topk.iter().enumerate() {
        let w = s_tilde.column(c)?.gather_rows(idx)?.scale(scale).softmax(0)?;
        let feats = x_tilde.gather_rows(idx)?;
        rows.push(w.reshape(&[1, idx.len()])?.matmul(feats)?);
    }
    let x_vis = concat_rows(&rows)?;
    let d = global.shape().iter().product();
    let g = global.reshape(&[1, d])?.matmul_t(w_g)?.reshape(&[d])?;
    x_vis.add_row(g)
}

/// `ŷ_c = cos(h^(c), t_c)`; zero rows score 0.
pub fn predict<'t>(h: Var<'t>, text: Var<'t>) -> Result<Var<'t>> {
    let hv = h.value();
    let zero = (0..hv.rows())
        .filter(|&i| hv.row(i).iter().all(|&v| v == 0.0))
        .count();
    if zero > 0 {
        log::warn!("{zero} zero-norm class feature(s) predicted as 0");
    }
    h.normalize_rows().mul(text)?.sum_axis(1)
}

/// Top-`k` patch indices per class column.
pub fn topk_per_class(scores: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    (0..scores.cols())
        .map(|c| topk_indices(&scores.column(c), k))
        .collect()
}

fn mean_of<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    wps::batch_mean(terms)
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, graph: ClassGraph) -> Result<Self> {
        cfg.validate()?;
        vocab.validate()?;
        graph.validate()?;
        if vocab.len() != graph.num_classes {
            return Err(Error::Config(format!(
                "vocabulary has {} classes, graph {}",
                vocab.len(),
                graph.num_classes
            )));
        }
        if vocab.seen_mask != graph.seen_mask {
            return Err(Error::Config("vocabulary and graph disagree on seen classes".into()));
        }
        let d = cfg.backbone.d;
        if vocab.embeddings.first().map_or(0, Vec::len) != d {
            return Err(Error::Config(format!("text embeddings must have width {d}")));
        }
        if vocab.seen_mask.iter().all(|s| !s) {
            return Err(Error::Config("vocabulary has no seen classes".into()));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::build(cfg.backbone.clone(), &mut store)?;
        let arm = Arm::build(cfg.arm.clone(), &backbone, &mut store)?;
        let atm = Atm::build(cfg.atm.clone(), d, &mut store)?;
        let w_g = store.add("global.w_g", Tensor::zeros(&[d, d]), false);
        let text = vocab.text();
        let seen_ids = vocab.seen_ids();
        let text_seen = Tensor::from_rows(&seen_ids.iter().map(|&c| text.row(c).to_vec()).collect::<Vec<_>>());
        let edges = graph.edges();
        Ok(Model {
            cfg,
            store,
            backbone,
            arm,
            atm,
            w_g,
            vocab,
            graph,
            edges,
            text,
            seen_ids,
            text_seen,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn seen_ids(&self) -> &[usize] {
        &self.seen_ids
    }

    pub fn text(&self) -> &Tensor {
        &self.text
    }

    pub fn prepare(&self, bag: &PatchBag) -> Result<Prepared> {
        if bag.labels.len() != self.num_classes() {
            return Err(Error::Config(format!(
                "image {} has {} labels for {} classes",
                bag.id,
                bag.labels.len(),
                self.num_classes()
            )));
        }
        let out = self.backbone.encode(&self.store, &bag.patches)?;
        let (s_star_seen, _) = wps::patch_scores_const(&out.patches_final, &self.text_seen)?;
        Ok(Prepared {
            id: bag.id,
            out,
            s_star_seen,
            labels: bag.labels.clone(),
            labels_seen: self.seen_ids.iter().map(|&c| bag.labels[c]).collect(),
        })
    }

    pub fn prepare_all(&self, bags: &[&PatchBag]) -> Result<Vec<Prepared>> {
        bags.iter().map(|b| self.prepare(b)).collect()
    }

    /// Text-stage output, or `None` when the variant skips the graph.
    pub fn text_stage<'t>(
        &self,
        bound: &Bound<'_, 't>,
        record: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Option<Var<'t>>> {
        if !self.cfg.variant.uses_atm() {
            return Ok(None);
        }
        let t = bound.tape().constant(self.text.clone());
        text_atm(bound, &self.atm, t, &self.edges, record).map(Some)
    }

    /// Forward pass of one image up to the class predictions.
    pub fn forward_image<'t>(
        &self,
        bound: &Bound<'_, 't>,
        p: &Prepared,
        h_txt: Option<Var<'t>>,
        topk: Option<&[Vec<usize>]>,
        record: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<(ImageForward<'t>, Vec<Vec<usize>>)> {
        let tape = bound.tape();
        let (x_tilde, delta) = if self.cfg.variant.uses_arm() {
            let a = adapt(bound, &self.backbone, &self.arm, &p.out)?;
            (a.x_tilde, Some(a.delta))
        } else {
            (tape.constant(p.out.patches_final.clone()), None)
        };
        let text = tape.constant(self.text.clone());
        let (s_tilde, _) = wps::patch_scores(x_tilde, text)?;
        let (s_seen, _) = wps::patch_scores(x_tilde, tape.constant(self.text_seen.clone()))?;
        let topk = match topk {
            Some(t) => t.to_vec(),
            None => topk_per_class(&s_tilde.value(), self.cfg.k_patch)?,
        };
        let global = tape.constant(p.out.global.clone());
        let x_vis = class_attentive_features(
            x_tilde,
            s_tilde,
            global,
            bound.get(self.w_g),
            &topk,
            self.cfg.logit_scale(),
        )?;
        let yhat = match h_txt {
            Some(h_txt) => {
                let x_mm = fuse(bound, &self.atm.fusion, x_vis, h_txt)?;
                let h_mm = mm_atm(bound, &self.atm, x_mm, &self.edges, record)?;
                predict(h_mm, text)?
            }
            None => predict(x_vis, text)?,
        };
        Ok((
            ImageForward {
                yhat,
                s_tilde,
                s_seen,
                delta,
                x_tilde,
            },
            topk,
        ))
    }

    /// Objective over a batch. With `targets`, the stop-gradient
    /// selections are replayed instead of recomputed.
    pub fn forward_batch<'t>(
        &self,
        bound: &Bound<'_, 't>,
        batch: &[&Prepared],
        lambda: f64,
        targets: Option<&[ImageTargets]>,
    ) -> Result<BatchForward<'t>> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let h_txt = self.text_stage(bound, None)?;
        let mut clsf = Vec::with_capacity(batch.len());
        let mut wps_terms = Vec::with_capacity(batch.len());
        let mut deltas = Vec::with_capacity(batch.len());
        let mut out_targets = Vec::with_capacity(batch.len());
        for (b, p) in batch.iter().enumerate() {
            let given = targets.map(|t| &t[b]);
            let (f, topk) = self.forward_image(bound, p, h_txt, given.map(|t| t.topk.as_slice()), None)?;
            let tg = match given {
                Some(t) => t.clone(),
                None => {
                    let s_seen = f.s_seen.value();
                    let z_model = wps::responsibilities(&s_seen, &p.labels_seen, self.cfg.logit_scale())?;
                    let z_prior =
                        wps::responsibilities(&p.s_star_seen, &p.labels_seen, self.cfg.prior_logit_scale())?;
                    let z_smooth = wps::smooth(&z_model, &z_prior, lambda)?;
                    let (hard, _) = wps::hard_negative_indices(&s_seen, &p.labels_seen, self.cfg.k_hard)?;
                    ImageTargets { z_smooth, hard, topk }
                }
            };
            let yhat_seen = f.yhat.gather_rows(&self.seen_ids)?;
            clsf.push(crate::metrics::ranking_loss(yhat_seen, &p.labels_seen)?);
            wps_terms.push(wps::wps_loss_image(f.s_seen, &tg.z_smooth, &p.labels_seen, &tg.hard)?);
            if let Some(d) = f.delta {
                deltas.push(d);
            }
            out_targets.push(tg);
        }
        let l_clsf = mean_of(&clsf)?;
        let l_wps = mean_of(&wps_terms)?;
        let l_pen = if deltas.is_empty() {
            bound.tape().constant(Tensor::scalar(0.0))
        } else {
            crate::arm::penalty(&deltas)?
        };
        let loss = l_clsf
            .add(l_wps.scale(self.cfg.gamma_wps))?
            .add(l_pen.scale(self.cfg.gamma_penalty))?;
        Ok(BatchForward {
            loss,
            l_clsf,
            l_wps,
            l_pen,
            targets: out_targets,
        })
    }

    /// Gradient-free scoring of one image.
    pub fn evaluate_image(&self, p: &Prepared, record_attention: bool) -> Result<ImageEval> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let h_txt = self.text_stage(&bound, None)?;
        let mut rec = Vec::new();
        let (f, _) = self.forward_image(&bound, p, h_txt, None, record_attention.then_some(&mut rec))?;
        let delta_abs_mean = match f.delta {
            Some(d) => {
                let v = d.value();
                v.data().iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64
            }
            None => 0.0,
        };
        Ok(ImageEval {
            id: p.id,
            yhat: f.yhat.value().into_data(),
            s_tilde: f.s_tilde.value(),
            delta_abs_mean,
            attention: rec,
        })
    }

    /// Seen-class column positions for a class id, if seen.
    pub fn seen_position(&self, class: usize) -> Option<usize> {
        self.seen_ids.iter().position(|&c| c == class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atm::ClassGraph;
    use crate::pipeline::data::{gen_synthetic_dataset, GenConfig};

    fn small_model() -> (Model, Vec<PatchBag>) {
        let cfg = ModelConfig::micro();
        let gen = GenConfig {
            classes: 6,
            unseen: 1,
            images: 6,
            grid_h: 3,
            grid_w: 3,
            d_in: 16,
            max_pos: 3,
            ..GenConfig::default()
        };
        let s = gen_synthetic_dataset(&gen).unwrap();
        let graph = ClassGraph::isolated(s.vocab.names.clone(), s.vocab.seen_mask.clone());
        (Model::new(cfg, s.vocab, graph).unwrap(), s.dataset.bags)
    }

    #[test]
    fn class_attentive_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]]));
        let s = tape.constant(Tensor::from_rows(&[[0.1], [0.9], [0.5]]));
        let g = tape.constant(Tensor::vector(vec![5.0, 5.0]));
        let w0 = tape.constant(Tensor::zeros(&[2, 2]));
        let topk = topk_per_class(&s.value(), 1).unwrap();
        let v = class_attentive_features(x, s, g, w0, &topk, 14.0).unwrap().value();
        assert_eq!(v.row(0), &[0.0, 2.0]);
        let flat = tape.constant(Tensor::from_rows(&[[0.3], [0.3], [0.3]]));
        let topk = topk_per_class(&flat.value(), 2).unwrap();
        assert_eq!(topk, vec![vec![0, 1]]);
        let eye = tape.constant(Tensor::eye(2));
        let v = class_attentive_features(x, flat, g, eye, &topk, 14.0).unwrap().value();
        assert_eq!(v.row(0), &[5.5, 6.0]);
    }

    #[test]
    fn predict_examples() {
        let tape = Tape::new();
        let t = tape.constant(Tensor::from_rows(&[[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]]));
        let h = tape.constant(Tensor::from_rows(&[[0.6, 0.8], [-2.0, 0.0], [0.0, 0.0]]));
        let y = predict(h, t).unwrap().value();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert_eq!(y.data()[1], -1.0);
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn zero_gammas_leave_classification_loss() {
        let (mut model, bags) = small_model();
        model.cfg.gamma_wps = 0.0;
        model.cfg.gamma_penalty = 0.0;
        let prepared: Vec<Prepared> = bags.iter().take(2).map(|b| model.prepare(b).unwrap()).collect();
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        let f = model.forward_batch(&bound, &refs, 0.5, None).unwrap();
        assert_eq!(f.loss.item(), f.l_clsf.item());
        assert!(f.l_wps.item() > 0.0);
    }

    #[test]
    fn targets_replay_reproduces_loss() {
        let (model, bags) = small_model();
        let prepared: Vec<Prepared> = bags.iter().take(3).map(|b| model.prepare(b).unwrap()).collect();
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        let a = model.forward_batch(&bound, &refs, 0.3, None).unwrap();
        let b = model.forward_batch(&bound, &refs, 0.3, Some(&a.targets)).unwrap();
        assert_eq!(a.loss.item(), b.loss.item());
        assert_eq!(a.targets, b.targets);
    }

    #[test]
    fn untouched_pathway_matches_frozen_scores() {
        let (model, bags) = small_model();
        let p = model.prepare(&bags[0]).unwrap();
        let e = model.evaluate_image(&p, false).unwrap();
        let (frozen, _) = wps::patch_scores_const(&p.out.patches_final, model.text()).unwrap();
        assert_eq!(e.s_tilde, frozen);
        assert_eq!(e.delta_abs_mean, 0.0);
        assert!(e.yhat.iter().all(|v| v.is_finite()));
    }
}
