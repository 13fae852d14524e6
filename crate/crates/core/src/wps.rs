//! Weakly supervised patch selection.
//!
//! Patch-class cosine scores, EM-style responsibilities over patches for
//! each positive class, prior smoothing with an annealed weight, hard
//! negative mining and the resulting loss. Responsibilities and hard sets
//! are plain tensors: they are fixed targets, never differentiated.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Cosine similarity between feature rows and (unit-norm) text rows.
/// Zero-norm feature rows score zero; their indices are returned.
pub fn patch_scores<'t>(features: Var<'t>, text: Var<'t>) -> Result<(Var<'t>, Vec<usize>)> {
    let zero_rows = zero_norm_rows(&features.value_ref());
    if !zero_rows.is_empty() {
        log::warn!("{} zero-norm feature row(s) scored as 0", zero_rows.len());
    }
    Ok((features.normalize_rows().matmul_t(text)?, zero_rows))
}

/// Gradient-free counterpart of [`patch_scores`].
pub fn patch_scores_const(features: &Tensor, text: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let zero_rows = zero_norm_rows(features);
    if !zero_rows.is_empty() {
        log::warn!("{} zero-norm feature row(s) scored as 0", zero_rows.len());
    }
    let mut normed = features.clone();
    for i in 0..normed.rows() {
        let n = tensor::dot(features.row(i), features.row(i)).sqrt();
        if n > 0.0 {
            normed.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok((normed.matmul_t(text)?, zero_rows))
}

fn zero_norm_rows(x: &Tensor) -> Vec<usize> {
    (0..x.rows())
        .filter(|&i| x.row(i).iter().all(|&v| v == 0.0))
        .collect()
}

/// Per positive class, softmax over patches of `logit_scale·S`; negative
/// columns are zero.
pub fn responsibilities(scores: &Tensor, labels: &[bool], logit_scale: f64) -> Result<Tensor> {
    let (n_p, c) = (scores.rows(), scores.cols());
    if scores.shape().len() != 2 || labels.len() != c {
        return Err(Error::dim("responsibilities", scores.shape(), &[n_p, labels.len()]));
    }
    if !(logit_scale > 0.0) {
        return Err(Error::Range(format!("logit scale must be > 0, got {logit_scale}")));
    }
    let mut z = Tensor::zeros(&[n_p, c]);
    let mut col = vec![0.0; n_p];
    for (j, _) in labels.iter().enumerate().filter(|(_, &y)| y) {
        for (i, v) in col.iter_mut().enumerate() {
            *v = logit_scale * scores.at(i, j);
        }
        if col.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidValue(format!("NaN score in class column {j}")));
        }
        tensor::softmax_in_place(&mut col);
        for (i, v) in col.iter().enumerate() {
            z.data_mut()[i * c + j] = *v;
        }
    }
    Ok(z)
}

/// `z' = λ·z* + (1−λ)·z`.
pub fn smooth(z_model: &Tensor, z_prior: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Range(format!("λ must lie in [0, 1], got {lambda}")));
    }
    if z_model.shape() != z_prior.shape() {
        return Err(Error::dim("smooth", z_model.shape(), z_prior.shape()));
    }
    // The endpoints return the operands bit for bit.
    if lambda == 1.0 {
        return Ok(z_prior.clone());
    }
    if lambda == 0.0 {
        return Ok(z_model.clone());
    }
    Ok(z_prior.zip_map(z_model, |p, m| lambda * p + (1.0 - lambda) * m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// Linear decay from 1 to 0 over the first `ramp_fraction` of training.
    Linear { ramp_fraction: f64 },
    Constant { value: f64 },
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Linear { ramp_fraction: 0.8 }
    }
}

impl LambdaSchedule {
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            LambdaSchedule::Constant { value } => value,
            LambdaSchedule::Linear { ramp_fraction } => {
                let ramp = ramp_fraction * total_steps as f64;
                if ramp <= 0.0 {
                    return 0.0;
                }
                (1.0 - step as f64 / ramp).clamp(0.0, 1.0)
            }
        }
    }
}

/// Default schedule: 1 → 0 linearly over the first 80% of steps.
pub fn lambda_schedule(step: usize, total_steps: usize) -> f64 {
    LambdaSchedule::default().at(step, total_steps)
}

/// Hardest patches of one negative class.
#[derive(Clone, Debug, PartialEq)]
pub struct HardSet {
    pub class: usize,
    pub patches: Vec<usize>,
}

/// For every negative class, the `k` patches with the highest score
/// (ties to the lower index). `k > N_p` is clamped; the flag reports it.
pub fn hard_negative_indices(scores: &Tensor, labels: &[bool], k: usize) -> Result<(Vec<HardSet>, bool)> {
    let (n_p, c) = (scores.rows(), scores.cols());
    if labels.len() != c {
        return Err(Error::dim("hard_negative_indices", scores.shape(), &[n_p, labels.len()]));
    }
    let clamped = k > n_p;
    if clamped {
        log::warn!("hard-negative K={k} exceeds {n_p} patches; clamped");
    }
    let k = k.min(n_p);
    let mut sets = Vec::new();
    for (j, _) in labels.iter().enumerate().filter(|(_, &y)| !y) {
        sets.push(HardSet {
            class: j,
            patches: tensor::topk_indices(&scores.column(j), k)?,
        });
    }
    Ok((sets, clamped))
}

/// Loss of one image:
/// `−Σ_{c∈P} Σ_i z'_{i,c} log σ(S̃_{i,c}) − Σ_{c∈N} Σ_{j∈hard(c)} log σ(−S̃_{j,c})`.
pub fn wps_loss_image<'t>(
    s_tilde: Var<'t>,
    z_smooth: &Tensor,
    labels: &[bool],
    hard: &[HardSet],
) -> Result<Var<'t>> {
    let shape = s_tilde.shape();
    if shape.len() != 2 || z_smooth.shape() != shape.as_slice() || labels.len() != shape[1] {
        return Err(Error::dim("wps_loss", &shape, z_smooth.shape()));
    }
    let c = shape[1];
    let mut pos_w = z_smooth.clone();
    for i in 0..pos_w.rows() {
        for (j, &y) in labels.iter().enumerate() {
            if !y {
                pos_w.data_mut()[i * c + j] = 0.0;
            }
        }
    }
    let mut neg_w = Tensor::zeros(&shape);
    for set in hard {
        for &i in &set.patches {
            neg_w.data_mut()[i * c + set.class] = 1.0;
        }
    }
    let pos = s_tilde.log_sigmoid().mul_const(&pos_w)?.sum();
    let neg = s_tilde.neg().log_sigmoid().mul_const(&neg_w)?.sum();
    Ok(pos.add(neg)?.neg())
}

/// Batch mean of per-image losses.
pub fn batch_mean<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let first = terms
        .first()
        .ok_or_else(|| Error::Contract("loss over an empty batch".into()))?;
    let mut total = *first;
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok(total.scale(1.0 / terms.len() as f64))
}
