//! Parasitic refinement pathway attached to the trailing backbone blocks.
//!
//! Each attached layer runs LoRA-adapted self-attention on the pathway's
//! own tokens, a depthwise 3×3 convolution over the patch grid, and
//! cross-attention back onto the frozen block output. A residual head then
//! turns the last pathway state into `Δx̃`, and `x̃ = x_orig + Δx̃`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_rows, scaled_dot_attention, Var};
use crate::backbone::{attention_sublayer, Backbone, BackboneOutput, LowRank};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    /// Number of trailing backbone blocks hosting a pathway layer.
    pub attach_layers: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Spatial size of the depthwise kernel (odd).
    pub kernel: usize,
    pub seed: u64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        ArmConfig {
            attach_layers: 2,
            rank: 4,
            alpha: 16.0,
            kernel: 3,
            seed: 11,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoraTarget {
    Query,
    Output,
}

/// Low-rank update `(α/r)·B·A` with `A: r×d`, `B: d×r`, `B` zero at init.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub target: LoraTarget,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn bind<'t>(&self, bound: &Bound<'_, 't>) -> LowRank<'t> {
        LowRank {
            a: bound.get(self.a),
            b: bound.get(self.b),
            scale: self.scaling(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ArmLayer {
    /// Backbone block this layer is attached to.
    pub block: usize,
    pub lora_q: LoraAdapter,
    pub lora_out: LoraAdapter,
    /// `k×k×d` depthwise kernel.
    pub dw_kernel: ParamId,
    /// Query and key projections of the cross-attention (values are the
    /// frozen tokens themselves).
    pub cross_q: ParamId,
    pub cross_k: ParamId,
}

/// `Δx̃ = W₂·LeakyReLU(W₁x + b₁) + b₂`, second map zero at init.
#[derive(Clone, Debug)]
pub struct ArmHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Arm {
    pub cfg: ArmConfig,
    pub layers: Vec<ArmLayer>,
    pub head: ArmHead,
}

/// Closed-form trainable count of the LoRA adapters: two adapters per
/// layer, each `r·d + d·r`.
pub fn lora_param_count(d: usize, rank: usize, layers: usize) -> usize {
    layers * 2 * (d * rank + rank * d)
}

fn add_adapter(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    cfg: &ArmConfig,
    target: LoraTarget,
    rng: &mut ChaCha8Rng,
) -> LoraAdapter {
    let a = store.add(
        format!("{prefix}.a"),
        Tensor::randn(&[cfg.rank, d], 1.0 / (d as f64).sqrt(), rng),
        false,
    );
    let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[d, cfg.rank]), false);
    LoraAdapter {
        a,
        b,
        rank: cfg.rank,
        alpha: cfg.alpha,
        target,
    }
}

impl Arm {
    pub fn build(cfg: ArmConfig, backbone: &Backbone, store: &mut ParamStore) -> Result<Self> {
        let d = backbone.cfg.d;
        let depth = backbone.cfg.depth;
        if cfg.rank == 0 || cfg.rank >= d {
            return Err(Error::Config(format!(
                "LoRA rank must be in 1..{d}, got {}",
                cfg.rank
            )));
        }
        if cfg.attach_layers == 0 || cfg.attach_layers > depth {
            return Err(Error::Config(format!(
                "cannot attach {} layers to a depth-{depth} backbone",
                cfg.attach_layers
            )));
        }
        if cfg.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel must have odd size, got {}",
                cfg.kernel
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = cfg.kernel;
        let mut layers = Vec::with_capacity(cfg.attach_layers);
        for (i, block) in (depth - cfg.attach_layers..depth).enumerate() {
            let p = format!("arm.layer{i}");
            let lora_q = add_adapter(store, &format!("{p}.lora_q"), d, &cfg, LoraTarget::Query, &mut rng);
            let lora_out =
                add_adapter(store, &format!("{p}.lora_out"), d, &cfg, LoraTarget::Output, &mut rng);
            let mut kernel = Tensor::zeros(&[k, k, d]);
            let centre = (k / 2) * k + k / 2;
            for ch in 0..d {
                kernel.data_mut()[centre * d + ch] = 1.0;
            }
            layers.push(ArmLayer {
                block,
                lora_q,
                lora_out,
                dw_kernel: store.add(format!("{p}.dw_kernel"), kernel, false),
                cross_q: store.add(format!("{p}.cross_q"), Tensor::eye(d), false),
                cross_k: store.add(format!("{p}.cross_k"), Tensor::eye(d), false),
            });
        }
        let head = ArmHead {
            w1: store.add(
                "arm.head.w1",
                Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng),
                false,
            ),
            b1: store.add("arm.head.b1", Tensor::zeros(&[d]), false),
            w2: store.add("arm.head.w2", Tensor::zeros(&[d, d]), false),
            b2: store.add("arm.head.b2", Tensor::zeros(&[d]), false),
        };
        Ok(Arm { cfg, layers, head })
    }
}

/// LoRA-adapted residual self-attention over the pathway tokens.
pub fn lora_attention<'t>(
    bound: &Bound<'_, 't>,
    backbone: &Backbone,
    layer: &ArmLayer,
    x_prev: Var<'t>,
) -> Result<Var<'t>> {
    let block = &backbone.blocks[layer.block];
    attention_sublayer(
        bound,
        block,
        x_prev,
        Some(layer.lora_q.bind(bound)),
        Some(layer.lora_out.bind(bound)),
    )
}

/// Depthwise convolution over the patch rows laid out on an `h×w` grid.
/// Row 0 (the global token) passes through unchanged.
pub fn local_context_encode<'t>(x: Var<'t>, h: usize, w: usize, kernel: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] < 1 {
        return Err(Error::Shape(format!("token matrix expected, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if n - 1 != h * w {
        return Err(Error::Shape(format!(
            "{} patch rows cannot form a {h}×{w} grid",
            n - 1
        )));
    }
    let global = x.slice_rows(0, 1)?;
    let patches = x
        .slice_rows(1, n)?
        .reshape(&[h, w, d])?
        .depthwise_conv2d(kernel)?
        .reshape(&[h * w, d])?;
    concat_rows(&[global, patches])
}

/// `Attn(Q = x_dw·W_qᵀ, K = x_orig·W_kᵀ, V = x_orig)`.
pub fn cross_attention_integrate<'t>(
    x_dw: Var<'t>,
    x_orig: Var<'t>,
    w_q: Var<'t>,
    w_k: Var<'t>,
) -> Result<Var<'t>> {
    if x_dw.shape().len() != 2 || x_dw.shape()[1] != x_orig.shape().get(1).copied().unwrap_or(0) {
        return Err(Error::dim("cross_attention", &x_dw.shape(), &x_orig.shape()));
    }
    let q = x_dw.matmul_t(w_q)?;
    let k = x_orig.matmul_t(w_k)?;
    scaled_dot_attention(q, k, x_orig)
}

pub fn head_forward<'t>(bound: &Bound<'_, 't>, head: &ArmHead, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul_t(bound.get(head.w1))?
        .add_row(bound.get(head.b1))?
        .leaky_relu(0.2)
        .matmul_t(bound.get(head.w2))?
        .add_row(bound.get(head.b2))
}

/// Output of one pathway pass.
pub struct Adapted<'t> {
    /// `x̃`, `N_p×d`.
    pub x_tilde: Var<'t>,
    /// `Δx̃`, `N_p×d`.
    pub delta: Var<'t>,
    /// `x_orig` as a constant, `N_p×d`.
    pub x_orig: Var<'t>,
}

/// Runs every pathway layer in order and the residual head.
pub fn adapt<'t>(
    bound: &Bound<'_, 't>,
    backbone: &Backbone,
    arm: &Arm,
    out: &BackboneOutput,
) -> Result<Adapted<'t>> {
    let first = arm
        .layers
        .first()
        .ok_or_else(|| Error::Config("refinement pathway has no layers".into()))?;
    let tape = bound.tape();
    let (h, w) = (backbone.cfg.grid_h, backbone.cfg.grid_w);
    let mut x = tape.constant(out.block_input(first.block).clone());
    for layer in &arm.layers {
        let x_lora = lora_attention(bound, backbone, layer, x)?;
        let x_dw = local_context_encode(x_lora, h, w, bound.get(layer.dw_kernel))?;
        let x_orig_l = tape.constant(out.per_block[layer.block].clone());
        x = cross_attention_integrate(
            x_dw,
            x_orig_l,
            bound.get(layer.cross_q),
            bound.get(layer.cross_k),
        )?;
    }
    let n = x.shape()[0];
    let delta = head_forward(bound, &arm.head, x.slice_rows(1, n)?)?;
    let x_orig = tape.constant(out.patches_final.clone());
    let x_tilde = x_orig.add(delta)?;
    Ok(Adapted {
        x_tilde,
        delta,
        x_orig,
    })
}

/// `Σ|Δx̃|` summed over the batch and divided by its size.
pub fn penalty<'t>(deltas: &[Var<'t>]) -> Result<Var<'t>> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::Contract("penalty over an empty batch".into()))?;
    let mut total = first.abs().sum();
    for d in &deltas[1..] {
        total = total.add(d.abs().sum())?;
    }
    Ok(total.scale(1.0 / deltas.len() as f64))
}
