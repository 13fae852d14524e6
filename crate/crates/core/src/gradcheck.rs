//! End-to-end finite-difference check of the training objective.
//!
//! The stop-gradient selections (smoothed responsibilities, hard negatives,
//! top-K patches) are computed once at the base point and replayed for
//! every perturbed evaluation, so the checked function is smooth apart
//! from activation and hinge kinks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::crg::{mine_all, Backend, MiningConfig, ReplayStore};
use crate::error::{Error, Result};
use crate::pipeline::data::{gen_synthetic_dataset, synthetic_crg_fixtures, GenConfig, Split};
use crate::pipeline::model::{ImageTargets, Model, Prepared};
use crate::pipeline::ModelConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub classes: usize,
    pub unseen: usize,
    /// Images in the checked batch.
    pub batch: usize,
    /// Central-difference step.
    pub step: f64,
    /// Floor of the relative-error denominator.
    pub floor: f64,
    pub tolerance: f64,
    /// Standard deviation of the noise added to every trainable parameter,
    /// relative to `1/√fan_in`, so no group sits at its zero initialisation.
    pub perturb: f64,
    /// λ of the smoothed targets.
    pub lambda: f64,
    pub seed: u64,
    /// Check at most this many entries per parameter tensor (all when `None`).
    pub max_per_param: Option<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig::micro(),
            classes: 6,
            unseen: 1,
            batch: 2,
            step: 1e-4,
            floor: 1e-5,
            tolerance: 1e-3,
            perturb: 0.3,
            lambda: 0.5,
            seed: 0,
            max_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub groups: Vec<GroupResult>,
    pub max_rel_err: f64,
    pub worst: String,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Builds the seeded micro instance: model with perturbed parameters and a
/// prepared training batch.
pub fn micro_instance(cfg: &GradcheckConfig) -> Result<(Model, Vec<Prepared>)> {
    let b = &cfg.model.backbone;
    let gen = GenConfig {
        classes: cfg.classes,
        unseen: cfg.unseen,
        images: 4 * cfg.batch.max(1),
        grid_h: b.grid_h,
        grid_w: b.grid_w,
        d_in: b.d_in,
        max_pos: 3.min(cfg.classes - cfg.unseen),
        seed: cfg.seed,
        ..GenConfig::default()
    };
    let s = gen_synthetic_dataset(&gen)?;
    let logs = synthetic_crg_fixtures(&s.vocab.names, 3, cfg.seed);
    let backend = Backend::Replay(ReplayStore::from_logs(logs));
    let graph = mine_all(&s.vocab.names, &s.vocab.seen_mask, &backend, &MiningConfig::default())?.graph;
    let mut model = Model::new(cfg.model.clone(), s.vocab, graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let ids: Vec<_> = model.store.trainable().map(|(id, _)| id).collect();
    for id in ids {
        let v = model.store.value_mut(id);
        let fan = *v.shape().last().unwrap_or(&1) as f64;
        let noise = Tensor::randn(v.shape(), cfg.perturb / fan.sqrt(), &mut rng);
        v.add_assign(&noise);
    }
    let train = s.dataset.split(Split::Train);
    let batch: Vec<_> = train.into_iter().take(cfg.batch).collect();
    if batch.len() < cfg.batch {
        return Err(Error::Config("micro instance has too few training images".into()));
    }
    let prepared = model.prepare_all(&batch)?;
    Ok((model, prepared))
}

fn loss_at(model: &Model, batch: &[&Prepared], lambda: f64, targets: &[ImageTargets]) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.store.bind(&tape);
    Ok(model.forward_batch(&bound, batch, lambda, Some(targets))?.loss.item())
}

/// Entries of a tensor of `len` scalars to check: all, or an evenly spaced subset.
fn entries(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (mut model, prepared) = micro_instance(cfg)?;
    let batch: Vec<&Prepared> = prepared.iter().collect();
    let (loss, targets, grads) = {
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        let f = model.forward_batch(&bound, &batch, cfg.lambda, None)?;
        tape.backward(f.loss)?;
        (f.loss.item(), f.targets, bound.grads())
    };
    let mut groups = Vec::new();
    let ids: Vec<_> = model.store.trainable().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let len = model.store.value(id).len();
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(model.store.value(id).shape()));
        let mut group = GroupResult {
            name,
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in entries(len, cfg.max_per_param) {
            let orig = model.store.value(id).data()[j];
            model.store.value_mut(id).data_mut()[j] = orig + cfg.step;
            let up = loss_at(&model, &batch, cfg.lambda, &targets)?;
            model.store.value_mut(id).data_mut()[j] = orig - cfg.step;
            let down = loss_at(&model, &batch, cfg.lambda, &targets)?;
            model.store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric, cfg.floor);
            group.checked += 1;
            if err > group.max_rel_err || group.checked == 1 {
                group.max_rel_err = err;
                group.worst_index = j;
                group.analytic = a;
                group.numeric = numeric;
            }
        }
        groups.push(group);
    }
    let worst = groups
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .ok_or_else(|| Error::Config("model has no trainable parameters".into()))?;
    let max_rel_err = worst.max_rel_err;
    Ok(GradcheckReport {
        loss,
        worst: format!("{}[{}]", worst.name, worst.worst_index),
        max_rel_err,
        tolerance: cfg.tolerance,
        passed: max_rel_err < cfg.tolerance && loss.is_finite(),
        groups,
    })
}
