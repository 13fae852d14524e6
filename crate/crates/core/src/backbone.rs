//! Seeded stand-in for a frozen vision-language encoder.
//!
//! A small pre-norm transformer: patch projection plus positional
//! embeddings, a learned-looking global token, and `depth` blocks of
//! single-head self-attention and a feed-forward layer. Every weight is a
//! pure function of the seed and registered as frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    /// Feature width.
    pub d: usize,
    /// Raw patch width.
    pub d_in: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub seed: u64,
    /// Output scale of each attention sublayer relative to the token norm.
    pub attn_gain: f64,
    /// Output scale of each feed-forward sublayer.
    pub ffn_gain: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            depth: 4,
            d: 32,
            d_in: 32,
            grid_h: 4,
            grid_w: 4,
            seed: 7,
            attn_gain: 2.0,
            ffn_gain: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.d == 0 || self.d_in == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config(format!(
                "backbone dimensions must be ≥ 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Frozen weights of one transformer block. Projections are `d_out × d_in`
/// and act on row tokens as `X·Wᵀ`.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_out: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_ff1: ParamId,
    pub w_ff2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub global_token: ParamId,
    pub blocks: Vec<BlockParams>,
}

/// Every intermediate the refinement pathway needs from one frozen pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    /// Tokens entering block 0, `(N_p+1)×d`, global token at row 0.
    pub input: Tensor,
    /// Output of every block, `(N_p+1)×d`.
    pub per_block: Vec<Tensor>,
    /// Patch rows of the last block, `N_p×d`.
    pub patches_final: Tensor,
    /// Global-token row of the last block, length `d`.
    pub global: Tensor,
}

impl BackboneOutput {
    /// Tokens entering block `l` (0-based).
    pub fn block_input(&self, l: usize) -> &Tensor {
        if l == 0 {
            &self.input
        } else {
            &self.per_block[l - 1]
        }
    }
}

/// Low-rank update `(α/r)·B·A` applied beside a frozen projection.
#[derive(Clone, Copy)]
pub struct LowRank<'t> {
    pub a: Var<'t>,
    pub b: Var<'t>,
    pub scale: f64,
}

/// `X·Wᵀ (+ s·(X·Aᵀ)·Bᵀ)`.
pub fn project<'t>(x: Var<'t>, w: Var<'t>, lora: Option<LowRank<'t>>) -> Result<Var<'t>> {
    let base = x.matmul_t(w)?;
    match lora {
        None => Ok(base),
        Some(l) => {
            let delta = x.matmul_t(l.a)?.matmul_t(l.b)?.scale(l.scale);
            base.add(delta)
        }
    }
}

/// Residual self-attention sublayer `x + W_out·Attn(W_q·LN(x), W_k·LN(x), W_v·LN(x))`,
/// optionally with low-rank updates on the query and output projections.
pub fn attention_sublayer<'t>(
    bound: &Bound<'_, 't>,
    block: &BlockParams,
    x: Var<'t>,
    lora_q: Option<LowRank<'t>>,
    lora_out: Option<LowRank<'t>>,
) -> Result<Var<'t>> {
    let gain = bound.get(block.ln1_gain).value();
    let bias = bound.get(block.ln1_bias).value();
    let h = x.layer_norm(gain.data(), bias.data(), LN_EPS)?;
    let q = project(h, bound.get(block.w_q), lora_q)?;
    let k = project(h, bound.get(block.w_k), None)?;
    let v = project(h, bound.get(block.w_v), None)?;
    let attn = crate::autodiff::scaled_dot_attention(q, k, v)?;
    let out = project(attn, bound.get(block.w_out), lora_out)?;
    x.add(out)
}

fn ffn_sublayer<'t>(bound: &Bound<'_, 't>, block: &BlockParams, x: Var<'t>) -> Result<Var<'t>> {
    let gain = bound.get(block.ln2_gain).value();
    let bias = bound.get(block.ln2_bias).value();
    let h = x.layer_norm(gain.data(), bias.data(), LN_EPS)?;
    let h = h.matmul_t(bound.get(block.w_ff1))?.leaky_relu(0.2);
    let h = h.matmul_t(bound.get(block.w_ff2))?;
    x.add(h)
}

impl Backbone {
    /// Registers frozen weights drawn from `cfg.seed` into `store`.
    pub fn build(cfg: BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d;
        let dff = 4 * d;
        let sd = (d as f64).sqrt();
        // Tokens carry unit-variance entries (norm ≈ √d) as in a trained
        // transformer's residual stream. Raw patches and text share one space
        // when the widths agree, so the patch projection is a scaled identity there.
        let embed_w = if cfg.d_in == d {
            Tensor::eye(d).map(|v| v * sd)
        } else {
            Tensor::randn(&[d, cfg.d_in], sd / (cfg.d_in as f64).sqrt(), &mut rng)
        };
        let embed = store.add("backbone.embed", embed_w, true);
        let pos = store.add(
            "backbone.pos",
            Tensor::randn(&[cfg.num_patches(), d], 0.05, &mut rng),
            true,
        );
        let global_token = store.add(
            "backbone.global_token",
            Tensor::randn(&[1, d], 1.0, &mut rng),
            true,
        );
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let name = |s: &str| format!("backbone.block{l}.{s}");
            let ones = Tensor::full(&[d], 1.0);
            let zeros = Tensor::zeros(&[d]);
            blocks.push(BlockParams {
                ln1_gain: store.add(name("ln1_gain"), ones.clone(), true),
                ln1_bias: store.add(name("ln1_bias"), zeros.clone(), true),
                w_q: store.add(name("w_q"), Tensor::randn(&[d, d], 1.0 / sd, &mut rng), true),
                w_k: store.add(name("w_k"), Tensor::randn(&[d, d], 1.0 / sd, &mut rng), true),
                w_v: store.add(name("w_v"), Tensor::randn(&[d, d], 1.0 / sd, &mut rng), true),
                w_out: store.add(
                    name("w_out"),
                    Tensor::randn(&[d, d], cfg.attn_gain / sd, &mut rng),
                    true,
                ),
                ln2_gain: store.add(name("ln2_gain"), ones, true),
                ln2_bias: store.add(name("ln2_bias"), zeros, true),
                w_ff1: store.add(name("w_ff1"), Tensor::randn(&[dff, d], 1.0 / sd, &mut rng), true),
                w_ff2: store.add(
                    name("w_ff2"),
                    Tensor::randn(&[d, dff], cfg.ffn_gain / (2.0 * sd), &mut rng),
                    true,
                ),
            });
        }
        Ok(Backbone {
            cfg,
            embed,
            pos,
            global_token,
            blocks,
        })
    }

    /// Maps a raw-space vector through the patch projection (no positional term).
    pub fn embed_vector(&self, store: &ParamStore, raw: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::new(vec![1, raw.len()], raw.to_vec())?;
        Ok(x.matmul_t(store.value(self.embed))?.into_data())
    }

    /// Frozen forward pass over one bag of raw patches `N_p×d_in`.
    pub fn encode(&self, store: &ParamStore, raw: &Tensor) -> Result<BackboneOutput> {
        let n_p = self.cfg.num_patches();
        if raw.shape().len() != 2 || raw.rows() != n_p || raw.cols() != self.cfg.d_in {
            return Err(Error::dim("encode", raw.shape(), &[n_p, self.cfg.d_in]));
        }
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let patches = tape
            .constant(raw.clone())
            .matmul_t(bound.get(self.embed))?
            .add(bound.get(self.pos))?;
        let mut x = crate::autodiff::concat_rows(&[bound.get(self.global_token), patches])?;
        let input = x.value();
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = attention_sublayer(&bound, block, x, None, None)?;
            x = ffn_sublayer(&bound, block, x)?;
            per_block.push(x.value());
        }
        let last = per_block.last().expect("depth ≥ 1");
        let d = self.cfg.d;
        let patches_final = Tensor::new(vec![n_p, d], last.data()[d..].to_vec())?;
        let global = Tensor::vector(last.row(0).to_vec());
        Ok(BackboneOutput {
            input,
            per_block,
            patches_final,
            global,
        })
    }
}

fn class_rng(seed: u64, class_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (class_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Unit-norm text embedding for `class_id`, deterministic per `(class_id, seed)`.
///
/// With an `anchor`, the embedding is `normalize(anchor/‖anchor‖ + noise·ε)`
/// with `ε ~ N(0, I/d)`; without one it is a random direction.
pub fn text_embed(
    class_id: usize,
    vocab_size: usize,
    d: usize,
    seed: u64,
    anchor: Option<(&[f64], f64)>,
) -> Result<Tensor> {
    if class_id >= vocab_size {
        return Err(Error::Range(format!(
            "class id {class_id} outside vocabulary of {vocab_size}"
        )));
    }
    let mut rng = class_rng(seed, class_id);
    let eps = Tensor::randn(&[d], 1.0 / (d as f64).sqrt(), &mut rng);
    let v = match anchor {
        None => eps.into_data(),
        Some((a, noise)) => {
            if a.len() != d {
                return Err(Error::dim("text_embed", &[a.len()], &[d]));
            }
            let a = normalize(a.to_vec());
            a.iter().zip(eps.data()).map(|(x, e)| x + noise * e).collect()
        }
    };
    Ok(Tensor::vector(normalize(v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Backbone, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            d: 8,
            d_in: 6,
            grid_h: 2,
            grid_w: 3,
            ..Default::default()
        };
        (Backbone::build(cfg, &mut store).unwrap(), store)
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let (bb, store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = Tensor::randn(&[6, 6], 1.0, &mut rng);
        let a = bb.encode(&store, &raw).unwrap();
        let b = bb.encode(&store, &raw).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_block.len(), 4);
        assert_eq!(a.patches_final.shape(), &[6, 8]);
        assert_eq!(a.global.shape(), &[8]);
        assert_eq!(a.per_block[0].shape(), &[7, 8]);
    }

    #[test]
    fn zero_input_stays_finite() {
        let (bb, store) = small();
        let out = bb.encode(&store, &Tensor::zeros(&[6, 6])).unwrap();
        assert!(out.per_block.iter().all(Tensor::is_finite));
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let (bb, store) = small();
        let err = bb.encode(&store, &Tensor::zeros(&[6, 5])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn perturbing_a_patch_spreads_but_weights_stay() {
        let (bb, store) = small();
        let before = store.checksum(true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = Tensor::randn(&[6, 6], 1.0, &mut rng);
        let mut moved = raw.clone();
        moved.row_mut(0)[0] += 0.5;
        let a = bb.encode(&store, &raw).unwrap();
        let b = bb.encode(&store, &moved).unwrap();
        for i in 0..6 {
            assert_ne!(a.patches_final.row(i), b.patches_final.row(i), "patch {i}");
        }
        assert_eq!(before, store.checksum(true));
        assert!(store.iter().all(|(_, p)| p.frozen));
    }

    #[test]
    fn text_embed_contract() {
        let t = text_embed(3, 10, 32, 9, None).unwrap();
        let n: f64 = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(t, text_embed(3, 10, 32, 9, None).unwrap());
        assert_ne!(t, text_embed(4, 10, 32, 9, None).unwrap());
        assert!(matches!(text_embed(10, 10, 32, 9, None), Err(Error::Range(_))));
    }
}
