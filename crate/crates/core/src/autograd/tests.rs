use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_slice(shape, data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Central differences of a scalar function.
fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[i] += h;
            lo[i] -= h;
            (f(&hi) - f(&lo)) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn forward_op_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[-1.0, 2.0]), false);
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);

    let z = tape.leaf(t(&[1, 2], &[0.0, 0.0]), false);
    let l = tape.log_softmax(z).unwrap();
    let ln2 = 2f64.ln();
    assert_eq!(tape.value(l).data(), &[-ln2, -ln2]);

    let img = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let p = tape.maxpool2(img).unwrap();
    assert_eq!(tape.value(p).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(p).data(), &[4.0]);
}

#[test]
fn square_sum_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    assert_eq!(grad_wrt_input(&tape, loss, x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn dot_product_gradients() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(t(&[2], &[3.0, -1.0]), true);
    let x = tape.leaf(t(&[2], &[3.0, -1.0]), true);
    let prod = tape.mul(w, x).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = grad_wrt_params(&tape, loss, &[w, x]).unwrap();
    assert_eq!(grads[0].data(), &[3.0, -1.0]);
    assert_eq!(grads[1].data(), &[3.0, -1.0]);
}

#[test]
fn bias_only_squared_error() {
    let mut tape = Tape::<f64>::new();
    let b = tape.leaf(Tensor::scalar(1.0), true);
    let target = tape.leaf(Tensor::scalar(0.0), false);
    let diff = tape.sub(b, target).unwrap();
    let sq = tape.mul(diff, diff).unwrap();
    let grads = grad_wrt_params(&tape, sq, &[b]).unwrap();
    assert_eq!(grads[0].data(), &[2.0]);
}

#[test]
fn no_path_gives_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    let w = tape.leaf(t(&[3], &[1.0, 1.0, 1.0]), true);
    let loss = tape.sum(w).unwrap();
    let _unused = tape.relu(x).unwrap();
    assert_eq!(grad_wrt_input(&tape, loss, x).unwrap().data(), &[0.0; 3]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shape_mismatches_are_reported() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t(&[2, 3], &[0.0; 6]), false);
    let b = tape.leaf(t(&[2, 3], &[0.0; 6]), false);
    assert!(matches!(
        tape.matmul(a, b),
        Err(Error::ShapeMismatch { op: "matmul", .. })
    ));
    let c = tape.leaf(t(&[3], &[0.0; 3]), false);
    assert!(matches!(tape.add(a, c), Err(Error::ShapeMismatch { .. })));
    let bias = tape.leaf(t(&[2], &[0.0; 2]), false);
    assert!(tape.add_bias(a, bias).is_err());
}

#[test]
fn non_finite_values_are_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1], &[1e300]), false);
    assert!(matches!(
        tape.scale(x, 1e300),
        Err(Error::NonFinite("scale"))
    ));
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1000], &[1.0; 1000]), true);
    assert_eq!(tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
    let d = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
    let kept = tape.value(d).data().iter().filter(|&&v| v != 0.0).count();
    assert!(tape.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
    assert!((400..600).contains(&kept));
    let loss = tape.sum(d).unwrap();
    let g = grad_wrt_input(&tape, loss, x).unwrap();
    assert_eq!(g.data(), tape.value(d).data());
}

/// matmul + bias + relu + matmul + bias + log-softmax + NLL.
fn two_layer_loss(
    x: &[f64],
    params: &[Vec<f64>],
    targets: &[usize],
    want_params: bool,
) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(t(&[3, 5], x), true);
    let shapes: [&[usize]; 4] = [&[5, 4], &[4], &[4, 3], &[3]];
    let p: Vec<Var> = params
        .iter()
        .zip(shapes)
        .map(|(d, s)| tape.leaf(t(s, d), want_params))
        .collect();
    let h = tape.matmul(xv, p[0]).unwrap();
    let h = tape.add_bias(h, p[1]).unwrap();
    let h = tape.relu(h).unwrap();
    let h = tape.matmul(h, p[2]).unwrap();
    let h = tape.add_bias(h, p[3]).unwrap();
    let lp = tape.log_softmax(h).unwrap();
    let loss = tape.nll_loss(lp, targets, Reduction::Mean).unwrap();
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss).unwrap();
    let gx = grads.take(xv).unwrap().into_data();
    let gp = if want_params {
        p.iter()
            .map(|&v| grads.take(v).unwrap().into_data())
            .collect()
    } else {
        Vec::new()
    };
    (value, gx, gp)
}

#[test]
fn random_two_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let targets = [0, 2, 1];
    for _ in 0..5 {
        let x = random(&mut rng, 15, 1.0);
        let params: Vec<Vec<f64>> = [20, 4, 12, 3]
            .iter()
            .map(|&n| random(&mut rng, n, 0.8))
            .collect();
        let (_, gx, gp) = two_layer_loss(&x, &params, &targets, true);

        let fx = |xx: &[f64]| two_layer_loss(xx, &params, &targets, false).0;
        assert!(max_rel_err(&gx, &numeric_grad(fx, &x, 1e-5)) < 1e-4);

        for (k, g) in gp.iter().enumerate() {
            let fp = |pk: &[f64]| {
                let mut ps = params.clone();
                ps[k] = pk.to_vec();
                two_layer_loss(&x, &ps, &targets, false).0
            };
            assert!(
                max_rel_err(g, &numeric_grad(fp, &params[k], 1e-5)) < 1e-4,
                "param {k}"
            );
        }
    }
}

/// conv + bias + relu + maxpool + flatten + matmul + sigmoid + BCE.
fn conv_net_loss(x: &[f64], w: &[f64], wf: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(t(&[2, 2, 6, 5], x), true);
    let wv = tape.leaf(t(&[3, 2, 3, 2], w), true);
    let bv = tape.leaf(t(&[3], &[0.1, -0.2, 0.05]), false);
    let fv = tape.leaf(t(&[12, 1], wf), false);
    let h = tape.conv2d(xv, wv).unwrap();
    let h = tape.add_bias(h, bv).unwrap();
    let h = tape.relu(h).unwrap();
    let h = tape.maxpool2(h).unwrap();
    let h = tape.flatten(h).unwrap();
    let h = tape.matmul(h, fv).unwrap();
    let p = tape.sigmoid(h).unwrap();
    let loss = tape.bce_loss(p, &[1.0, 0.0], Reduction::Sum).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    (
        tape.value(loss).data()[0],
        grads.take(xv).unwrap().into_data(),
        grads.take(wv).unwrap().into_data(),
    )
}

#[test]
fn conv_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, 120, 1.0);
    let w = random(&mut rng, 36, 0.5);
    let wf = random(&mut rng, 12, 0.5);
    let (_, gx, gw) = conv_net_loss(&x, &w, &wf);
    assert!(
        max_rel_err(
            &gx,
            &numeric_grad(|v| conv_net_loss(v, &w, &wf).0, &x, 1e-5)
        ) < 1e-4
    );
    assert!(
        max_rel_err(
            &gw,
            &numeric_grad(|v| conv_net_loss(&x, v, &wf).0, &w, 1e-5)
        ) < 1e-4
    );
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random(&mut rng, 6, 1.0);
    let w = random(&mut rng, 6, 1.0);
    let (a, b) = (0.7, -1.3);
    let build = |ca: f64, cb: f64| {
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(t(&[2, 3], &x), true);
        let wv = tape.leaf(t(&[3, 2], &w), false);
        let h = tape.matmul(xv, wv).unwrap();
        let s = tape.sigmoid(h).unwrap();
        let l1 = tape.sum(s).unwrap();
        let sq = tape.mul(xv, xv).unwrap();
        let l2 = tape.sum(sq).unwrap();
        let l1s = tape.scale(l1, ca).unwrap();
        let l2s = tape.scale(l2, cb).unwrap();
        let total = tape.add(l1s, l2s).unwrap();
        grad_wrt_input(&tape, total, xv).unwrap().into_data()
    };
    let combined = build(a, b);
    let (g1, g2) = (build(1.0, 0.0), build(0.0, 1.0));
    for i in 0..6 {
        assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
    }
}

#[test]
fn logsoftmax_nll_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let z = random(&mut rng, 10, 5.0);
        let target = rng.gen_range(0..10);
        let mut tape = Tape::<f64>::new();
        let zv = tape.leaf(t(&[1, 10], &z), true);
        let lp = tape.log_softmax(zv).unwrap();
        let loss = tape.nll_loss(lp, &[target], Reduction::Sum).unwrap();
        let g = grad_wrt_input(&tape, loss, zv).unwrap();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
        for (i, &gi) in g.data().iter().enumerate() {
            let expected = (z[i] - max).exp() / denom - if i == target { 1.0 } else { 0.0 };
            assert!((gi - expected).abs() < 1e-10);
        }
    }
}

#[test]
fn saturated_logsoftmax_keeps_relative_precision_in_f32() {
    // target probability is 1 - O(1e-9): f32 cannot represent it, yet loss
    // and target-logit gradient stay accurate
    let z = [20.0, 0.0, -1.0, 2.0];
    let mut tape = Tape::<f32>::new();
    let zv = tape.leaf(
        Tensor::new(&[1, 4], z.iter().map(|&v| v as f32).collect()).unwrap(),
        true,
    );
    let lp = tape.log_softmax(zv).unwrap();
    let loss = tape.nll_loss(lp, &[0], Reduction::Sum).unwrap();
    let g = grad_wrt_input(&tape, loss, zv).unwrap();
    let rest: f64 = z[1..].iter().map(|v| (v - 20.0f64).exp()).sum();
    let rel = |a: f32, b: f64| (a as f64 - b).abs() / b.abs();
    assert!(rel(tape.value(loss).data()[0], rest.ln_1p()) < 1e-5);
    assert!(rel(g.data()[0], -rest / (1.0 + rest)) < 1e-5);
    let sum: f32 = g.data().iter().sum();
    assert!(sum.abs() < 1e-12);
}

#[test]
fn eval_gradients_are_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, 120, 1.0);
    let w = random(&mut rng, 36, 0.5);
    let wf = random(&mut rng, 12, 0.5);
    let first = conv_net_loss(&x, &w, &wf).1;
    for _ in 0..3 {
        let again = conv_net_loss(&x, &w, &wf).1;
        assert!(first
            .iter()
            .zip(&again)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn bce_clamps_saturated_probabilities() {
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(t(&[2], &[1.0, 0.5]), true);
    let loss = tape.bce_loss(p, &[1.0, 1.0], Reduction::None).unwrap();
    let v = tape.value(loss).data();
    assert!(v[0] > 0.0 && v[0] < 1.1e-7);
    assert!((v[1] - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn nll_picks_target_log_probability() {
    let mut tape = Tape::<f64>::new();
    let lp = tape.leaf(t(&[1, 2], &[-0.1, -2.3]), true);
    let loss = tape.nll_loss(lp, &[0], Reduction::Mean).unwrap();
    assert_eq!(tape.value(loss).data(), &[0.1]);
    assert!(matches!(
        tape.nll_loss(lp, &[2], Reduction::Mean),
        Err(Error::InvalidLabel {
            label: 2,
            classes: 2
        })
    ));
}

#[test]
fn kink_signatures_track_relu_pattern() {
    let sig = |vals: &[f64]| {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], vals), false);
        tape.relu(x).unwrap();
        tape.kink_signatures(2)
    };
    let a = sig(&[1.0, -1.0, 2.0, 3.0]);
    let b = sig(&[0.5, -0.2, 2.0, 3.0]);
    let c = sig(&[-0.5, -0.2, 2.0, 3.0]);
    assert_eq!(a, b);
    assert_ne!(a[0], c[0]);
    assert_eq!(a[1], c[1]);
}

#[test]
fn pool_signatures_do_not_depend_on_batch_position() {
    // the same image in rows 0 and 1 must fingerprint identically
    let img = [3.0, 1.0, 0.0, 2.0, 1.0, 4.0, 5.0, 0.0];
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2, 1, 2, 2], &img), false);
    tape.maxpool2(x).unwrap();
    let sigs = tape.kink_signatures(2);
    assert_ne!(sigs[0], sigs[1]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(
        t(
            &[2, 1, 2, 2],
            &[img[..4].to_vec(), img[..4].to_vec()].concat(),
        ),
        false,
    );
    tape.maxpool2(x).unwrap();
    let sigs = tape.kink_signatures(2);
    assert_eq!(sigs[0], sigs[1]);
}
