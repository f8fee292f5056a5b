use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{central_differences, max_relative_error};
use super::{Tape, Var};
use crate::tensor::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares tape gradients of `sum(f(inputs) * probe)` against central
/// differences for every input.
fn check_op(shapes: &[&[usize]], seed: u64, f: impl for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let probe = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&vars).value();
        random(out.shape(), &mut rng)
    };
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&vars).value();
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&vars);
    let loss = out.mul(tape.constant(probe.clone())).sum();
    let grads = tape.backward(loss);
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("gradient").data().to_vec();
        let numeric = central_differences(input.data(), 1e-6, |x| {
            let mut ins = inputs.clone();
            ins[i] = Tensor::from_vec(input.shape(), x.to_vec()).unwrap();
            eval(&ins)
        });
        let err = max_relative_error(&analytic, &numeric, 1e-3);
        assert!(err < 1e-5, "input {i}: relative error {err}");
    }
}

#[test]
fn elementwise_ops() {
    check_op(&[&[3, 4], &[3, 4]], 1, |v| v[0].add(v[1]).mul(v[0]).sub(v[1].scale(0.3)));
    check_op(&[&[2, 5]], 2, |v| v[0].gelu().sigmoid().relu().add_scalar(0.5));
    check_op(&[&[4, 3], &[3]], 3, |v| v[0].add_bias(v[1]));
    check_op(&[&[2, 3, 4], &[2, 3]], 4, |v| v[0].mul_rows(v[1]));
}

#[test]
fn linear_and_matmul() {
    check_op(&[&[2, 3, 4], &[4, 5], &[5]], 5, |v| v[0].linear(v[1], Some(v[2])));
    check_op(&[&[3, 4], &[5, 4]], 6, |v| v[0].matmul_nt(v[1]));
}

#[test]
fn normalizations() {
    check_op(&[&[3, 6], &[6], &[6]], 7, |v| v[0].layer_norm(v[1], v[2], 1e-6));
    check_op(&[&[3, 6]], 8, |v| v[0].softmax_last());
    check_op(&[&[3, 6]], 9, |v| v[0].l2_normalize(1e-12));
}

#[test]
fn layout_ops() {
    check_op(&[&[2, 4, 6, 3]], 10, |v| v[0].patchify(2));
    check_op(&[&[2, 2, 3, 8]], 11, |v| v[0].unpatchify(2));
    check_op(&[&[2, 3, 5, 2]], 12, |v| v[0].resize_bilinear(7, 4));
    check_op(&[&[2, 4, 4, 2]], 13, |v| v[0].resize_bilinear(2, 8));
    check_op(&[&[2, 3], &[2, 4]], 14, |v| Var::concat_last(&[v[0], v[1]]));
    check_op(&[&[2, 3], &[1, 3]], 15, |v| Var::concat_leading(&[v[0], v[1]]).slice_leading(1, 3));
    check_op(&[&[3, 2]], 16, |v| v[0].select_leading(&[2, 0, 2]));
    check_op(&[&[2, 3, 4]], 17, |v| v[0].mean_inner().reshape(&[8]).mean());
}

#[test]
fn attention_gradients() {
    check_op(&[&[2, 4, 6], &[2, 5, 6], &[2, 5, 6]], 18, |v| Var::attention(v[0], v[1], v[2], 2));
}

#[test]
fn cross_image_max_mean_gradient() {
    check_op(&[&[6, 6]], 19, |v| v[0].cross_image_max_mean(3, 2));
    check_op(&[&[3, 3]], 20, |v| v[0].cross_image_max_mean(1, 3));
}

#[test]
fn patchify_roundtrip_and_values() {
    let tape = Tape::<f64>::new();
    let x = Tensor::from_fn(&[1, 4, 4, 2], |i| i as f64);
    let v = tape.constant(x.clone());
    let p = v.patchify(2);
    assert_eq!(p.shape(), vec![1, 2, 2, 8]);
    // first patch gathers pixels (0,0),(0,1),(1,0),(1,1)
    assert_eq!(&p.value().data()[..8], &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
    assert_eq!(*p.unpatchify(2).value(), x);
}

#[test]
fn resize_identity_and_constant() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 3, 3, 2], 0.7));
    let up = x.resize_bilinear(7, 5).value();
    assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    assert_eq!(*x.resize_bilinear(3, 3).value(), *x.value());
}

#[test]
fn inference_tape_records_no_gradients() {
    let tape = Tape::<f32>::inference();
    let w = tape.leaf(Tensor::ones(&[2, 2]), true);
    assert!(!w.requires_grad());
}
