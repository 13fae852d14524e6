//! Composite expressions on the tape against central differences.

use ovmlr_core::autodiff::{concat_cols, scaled_dot_attention, Tape, Var};
use ovmlr_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// Checks every input entry of `f` (a scalar function of several tensors).
fn check<F>(inputs: Vec<Tensor>, f: F)
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&vars).item()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&vars);
    tape.backward(out).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = v.grad().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].len() {
            let mut up = inputs.clone();
            up[k].data_mut()[j] += H;
            let mut down = inputs.clone();
            down[k].data_mut()[j] -= H;
            let numeric = (eval(&up) - eval(&down)) / (2.0 * H);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "input {k}[{j}]: analytic {a} numeric {numeric}");
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn attention_block() {
    check(vec![rand(&[3, 4], 1), rand(&[5, 4], 2), rand(&[5, 2], 3)], |x| {
        scaled_dot_attention(x[0], x[1], x[2]).unwrap().log_sigmoid().sum()
    });
}

#[test]
fn normalised_cosine_scores() {
    check(vec![rand(&[4, 3], 4), rand(&[2, 3], 5)], |x| {
        let s = x[0].normalize_rows().matmul_t(x[1].normalize_rows()).unwrap();
        s.scale(3.0).softmax(0).unwrap().mul(s).unwrap().sum()
    });
}

#[test]
fn layer_norm_and_activations() {
    let gain = [1.5, -0.5, 0.7, 1.0];
    let bias = [0.1, 0.0, -0.2, 0.3];
    check(vec![rand(&[3, 4], 6), rand(&[4, 4], 7)], move |x| {
        x[0].layer_norm(&gain, &bias, 1e-5)
            .unwrap()
            .matmul_t(x[1])
            .unwrap()
            .leaky_relu(0.2)
            .sigmoid()
            .sum()
    });
}

#[test]
fn depthwise_convolution() {
    check(vec![rand(&[3, 4, 2], 8), rand(&[3, 3, 2], 9)], |x| {
        let y = x[0].depthwise_conv2d(x[1]).unwrap();
        y.mul(y).unwrap().sum()
    });
}

#[test]
fn graph_gather_scatter_and_segments() {
    let src = [0, 0, 1, 1, 1, 2];
    let dst = [0, 2, 1, 0, 2, 2];
    let offsets = [0, 2, 5, 6];
    check(vec![rand(&[3, 2], 10), rand(&[6], 11)], move |x| {
        let alpha = x[1].segment_softmax(&offsets).unwrap();
        let msg = x[0].gather_rows(&dst).unwrap().mul_col(alpha).unwrap();
        let agg = msg.scatter_add_rows(&src, 3).unwrap();
        let both = concat_cols(&[agg, x[0]]).unwrap();
        both.mul(both).unwrap().sum_axis(1).unwrap().log_sigmoid().sum()
    });
}
