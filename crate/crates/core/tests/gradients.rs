//! Central finite-difference checks for every differentiable op.
//!
//! The oracle perturbs each input element by ±h at float64 and compares
//! (f(x+h) - f(x-h)) / 2h against the tape gradient. It never touches the
//! backward implementation it is checking.

use entroprune::{Tape, Tensor, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| (rng.gen::<f64>() - 0.5) * 2.0 * scale).collect();
    Tensor::new(shape, data).unwrap()
}

/// Scalar-valued forward built from leaves; returns the loss var.
type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn check_gradients(name: &str, inputs: &[Tensor<f64>], build: &Build) {
    // Autodiff gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().to_vec())
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += H;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let ad = grads[ti][ei];
            let denom = fd.abs().max(ad.abs());
            let err = if denom < 1e-7 {
                (ad - fd).abs()
            } else {
                (ad - fd).abs() / denom
            };
            if err > worst {
                worst = err;
            }
            assert!(
                err < TOL,
                "{name}: input {ti} elem {ei}: autodiff {ad} vs fd {fd} (err {err:.3e})"
            );
        }
    }
    println!("{name}: max rel err {worst:.3e}");
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, vec![5, 7], 1.0);
    let b = rand_tensor(&mut rng, vec![7, 3], 1.0);
    let w = rand_tensor(&mut rng, vec![5, 3], 1.0);
    check_gradients("matmul", &[a, b, w.clone()], &move |tape, vs| {
        let c = tape.matmul(vs[0], vs[1]).unwrap();
        let weighted = tape.mul(c, vs[2]).unwrap();
        tape.sum_all(weighted)
    });
}

#[test]
fn batch_matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&mut rng, vec![3, 2, 4], 1.0);
    let b = rand_tensor(&mut rng, vec![3, 4, 2], 1.0);
    let w = rand_tensor(&mut rng, vec![3, 2, 2], 1.0);
    check_gradients("batch_matmul", &[a, b, w], &move |tape, vs| {
        let c = tape.batch_matmul(vs[0], vs[1]).unwrap();
        let weighted = tape.mul(c, vs[2]).unwrap();
        tape.sum_all(weighted)
    });
}

#[test]
fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, vec![3, 5], 2.0);
    let w = rand_tensor(&mut rng, vec![3, 5], 1.0);
    check_gradients("softmax", &[x, w], &move |tape, vs| {
        let s = tape.softmax(vs[0], 1).unwrap();
        let weighted = tape.mul(s, vs[1]).unwrap();
        tape.sum_all(weighted)
    });
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, vec![4, 6], 2.0);
    let gamma = rand_tensor(&mut rng, vec![6], 1.0);
    let beta = rand_tensor(&mut rng, vec![6], 0.5);
    let w = rand_tensor(&mut rng, vec![4, 6], 1.0);
    check_gradients("layer_norm", &[x, gamma, beta, w], &move |tape, vs| {
        let y = tape.layer_norm(vs[0], vs[1], vs[2], 1e-6).unwrap();
        let weighted = tape.mul(y, vs[3]).unwrap();
        tape.sum_all(weighted)
    });
}

#[test]
fn gelu_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&mut rng, vec![17], 3.0);
    let w = rand_tensor(&mut rng, vec![17], 1.0);
    check_gradients("gelu", &[x, w], &move |tape, vs| {
        let y = tape.gelu(vs[0]);
        let weighted = tape.mul(y, vs[1]).unwrap();
        tape.sum_all(weighted)
    });
}

#[test]
fn elementwise_and_scale_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = rand_tensor(&mut rng, vec![9], 1.5);
    let b = rand_tensor(&mut rng, vec![9], 1.5);
    check_gradients("add_sub_mul_scale", &[a, b], &move |tape, vs| {
        let s = tape.add(vs[0], vs[1]).unwrap();
        let d = tape.sub(s, vs[1]).unwrap();
        let m = tape.mul(d, vs[1]).unwrap();
        let sc = tape.scale(m, 0.7);
        tape.sum_all(sc)
    });
}

#[test]
fn add_bias_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, vec![2, 3, 4], 1.0);
    let bias = rand_tensor(&mut rng, vec![4], 1.0);
    let pos = rand_tensor(&mut rng, vec![3, 4], 1.0);
    let w = rand_tensor(&mut rng, vec![2, 3, 4], 1.0);
    check_gradients("add_bias", &[x, bias, pos, w], &move |tape, vs| {
        let withb = tape.add_bias(vs[0], vs[1]).unwrap();
        let withp = tape.add_bias(withb, vs[2]).unwrap();
        let weighted = tape.mul(withp, vs[3]).unwrap();
        tape.sum_all(weighted)
    });
}

#[test]
fn shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(&mut rng, vec![2, 3, 4], 1.0);
    let w = rand_tensor(&mut rng, vec![4, 2, 3], 1.0);
    check_gradients("permute_reshape_transpose", &[x, w], &move |tape, vs| {
        let p = tape.permute(vs[0], &[2, 0, 1]).unwrap();
        let weighted = tape.mul(p, vs[1]).unwrap();
        let r = tape.reshape(weighted, vec![4, 6]).unwrap();
        let t = tape.transpose(r).unwrap();
        tape.sum_all(t)
    });
}

#[test]
fn reduce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_tensor(&mut rng, vec![3, 5], 2.0);
    let wm = rand_tensor(&mut rng, vec![3], 1.0);
    let wv = rand_tensor(&mut rng, vec![3], 1.0);
    check_gradients("reduce_mean_var", &[x, wm, wv], &move |tape, vs| {
        let m = tape.reduce_mean(vs[0], 1).unwrap();
        let v = tape.reduce_var(vs[0], 1).unwrap();
        let tm = tape.mul(m, vs[1]).unwrap();
        let tv = tape.mul(v, vs[2]).unwrap();
        let s = tape.add(tm, tv).unwrap();
        tape.sum_all(s)
    });
}

#[test]
fn token_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let tokens = rand_tensor(&mut rng, vec![2, 3, 4], 1.0);
    let cls = rand_tensor(&mut rng, vec![4], 1.0);
    let w = rand_tensor(&mut rng, vec![2, 4], 1.0);
    check_gradients("prepend_select_token", &[tokens, cls, w], &move |tape, vs| {
        let seq = tape.prepend_token(vs[0], vs[1]).unwrap();
        let first = tape.select_token(seq, 0).unwrap();
        let third = tape.select_token(seq, 2).unwrap();
        let mix = tape.add(first, third).unwrap();
        let weighted = tape.mul(mix, vs[2]).unwrap();
        tape.sum_all(weighted)
    });
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = rand_tensor(&mut rng, vec![4, 6], 2.0);
    check_gradients("cross_entropy", &[logits], &move |tape, vs| {
        tape.cross_entropy(vs[0], &[0, 2, 5, 1]).unwrap()
    });
}

#[test]
fn composite_attention_like_gradient() {
    // A stack resembling one attention head end to end.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = rand_tensor(&mut rng, vec![4, 6], 1.0);
    let wq = rand_tensor(&mut rng, vec![6, 6], 0.5);
    let wk = rand_tensor(&mut rng, vec![6, 6], 0.5);
    let wv = rand_tensor(&mut rng, vec![6, 6], 0.5);
    check_gradients("attention_composite", &[x, wq, wk, wv], &move |tape, vs| {
        let q = tape.matmul(vs[0], vs[1]).unwrap();
        let k = tape.matmul(vs[0], vs[2]).unwrap();
        let v = tape.matmul(vs[0], vs[3]).unwrap();
        let kt = tape.transpose(k).unwrap();
        let scores = tape.matmul(q, kt).unwrap();
        let scaled = tape.scale(scores, 1.0 / (6.0f64).sqrt());
        let probs = tape.softmax(scaled, 1).unwrap();
        let ctx = tape.matmul(probs, v).unwrap();
        let res = tape.add(ctx, vs[0]).unwrap();
        tape.sum_all(res)
    });
}
