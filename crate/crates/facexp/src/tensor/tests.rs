//! Finite-difference checks for every graph op. These are the bedrock the
//! training-level gradient guarantees rest on.

use super::*;
use ndarray::{arr0, Array, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() * 2.0 - 1.0)
}

/// Central finite differences of `f` at `x0`, perturbing every element.
fn fd_grad(f: &dyn Fn(&ArrayD<f64>) -> f64, x0: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(x0.raw_dim());
    for idx in 0..x0.len() {
        let mut plus = x0.clone();
        let mut minus = x0.clone();
        plus.as_slice_mut().unwrap()[idx] += eps;
        minus.as_slice_mut().unwrap()[idx] -= eps;
        g.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * eps);
    }
    g
}

fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    for (x, y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(1.0);
        assert!(
            (x - y).abs() / denom < tol,
            "{what}: {x} vs {y} (rel {})",
            (x - y).abs() / denom
        );
    }
}

/// Check analytic input gradient of a scalar-valued graph builder against FD.
fn check_grad(
    shape: &[usize],
    seed: u64,
    tol: f64,
    what: &str,
    build: &dyn Fn(&mut Graph, Var) -> Var,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rand_arr(shape, &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let loss = build(&mut g, x);
    let grads = g.backward(loss);
    let analytic = grads.wrt(x).expect("input grad").clone();
    let numeric = fd_grad(
        &|xv: &ArrayD<f64>| {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone());
            let loss = build(&mut g, x);
            g.scalar(loss)
        },
        &x0,
        1e-5,
    );
    assert_close(&analytic, &numeric, tol, what);
}

#[test]
fn grad_linear_chain() {
    check_grad(&[3, 4], 10, 1e-6, "scale+mean", &|g, x| {
        let y = g.scale(x, 3.5);
        g.mean_all(y)
    });
}

#[test]
fn grad_add_sub() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b0 = rand_arr(&[3, 4], &mut rng);
    let b0c = b0.clone();
    check_grad(&[3, 4], 12, 1e-6, "add/sub", &move |g, x| {
        let b = g.leaf(b0c.clone());
        let s = g.add(x, b);
        let d = g.sub(s, x);
        let s2 = g.add(d, x);
        g.mean_all(s2)
    });
}

#[test]
fn grad_matmul_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w0 = rand_arr(&[4, 5], &mut rng);
    let b0 = rand_arr(&[5], &mut rng);
    check_grad(&[3, 4], 14, 1e-6, "matmul+bias", &move |g, x| {
        let w = g.leaf(w0.clone());
        let b = g.leaf(b0.clone());
        let y = g.matmul(x, w);
        let y = g.add_row_bias(y, b);
        let y = g.sigmoid(y);
        g.mean_all(y)
    });
}

#[test]
fn grad_matmul_weight_side() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a0 = rand_arr(&[3, 4], &mut rng);
    check_grad(&[4, 5], 16, 1e-6, "matmul wrt weight", &move |g, w| {
        let a = g.leaf(a0.clone());
        let y = g.matmul(a, w);
        g.mean_all(y)
    });
}

#[test]
fn grad_activations() {
    check_grad(&[4, 6], 17, 1e-5, "relu", &|g, x| {
        let y = g.relu(x);
        g.mean_all(y)
    });
    check_grad(&[4, 6], 18, 1e-5, "leaky_relu", &|g, x| {
        let y = g.leaky_relu(x, 0.2);
        g.mean_all(y)
    });
    check_grad(&[4, 6], 19, 1e-6, "sigmoid", &|g, x| {
        let y = g.sigmoid(x);
        g.mean_all(y)
    });
}

#[test]
fn grad_conv_pool_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let w0 = rand_arr(&[3, 3, 2, 3], &mut rng);
    let b0 = rand_arr(&[3], &mut rng);
    let w0c = w0.clone();
    let b0c = b0.clone();
    check_grad(&[2, 4, 4, 2], 21, 1e-5, "conv input", &move |g, x| {
        let w = g.leaf(w0c.clone());
        let b = g.leaf(b0c.clone());
        let y = g.conv3x3(x, w, b);
        let y = g.avgpool2(y);
        let y = g.upsample2(y);
        g.mean_all(y)
    });

    // weight-side gradient
    let x0 = rand_arr(&[2, 4, 4, 2], &mut rng);
    check_grad(&[3, 3, 2, 3], 22, 1e-5, "conv weight", &move |g, w| {
        let x = g.leaf(x0.clone());
        let b = g.leaf(b0.clone());
        let y = g.conv3x3(x, w, b);
        let y = g.relu(y);
        g.mean_all(y)
    });
}

#[test]
fn grad_batchnorm_train() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let gamma0 = rand_arr(&[3], &mut rng).mapv(|v| v + 2.0);
    let beta0 = rand_arr(&[3], &mut rng);
    let g0 = gamma0.clone();
    let b0 = beta0.clone();
    check_grad(&[4, 2, 2, 3], 24, 1e-4, "batchnorm x", &move |g, x| {
        let ga = g.leaf(g0.clone());
        let be = g.leaf(b0.clone());
        let (y, _) = g.batchnorm_train(x, ga, be, 1e-5);
        let y = g.sigmoid(y);
        g.mean_all(y)
    });
    let x0 = rand_arr(&[4, 2, 2, 3], &mut rng);
    let x0c = x0.clone();
    let b1 = beta0.clone();
    check_grad(&[3], 25, 1e-5, "batchnorm gamma", &move |g, ga| {
        let x = g.leaf(x0c.clone());
        let be = g.leaf(b1.clone());
        let (y, _) = g.batchnorm_train(x, ga, be, 1e-5);
        let y = g.sigmoid(y);
        g.mean_all(y)
    });
    check_grad(&[3], 26, 1e-5, "batchnorm beta", &move |g, be| {
        let x = g.leaf(x0.clone());
        let ga = g.leaf(gamma0.clone());
        let (y, _) = g.batchnorm_train(x, ga, be, 1e-5);
        let y = g.sigmoid(y);
        g.mean_all(y)
    });
}

#[test]
fn grad_batchnorm_eval() {
    let mean = Array::from_vec(vec![0.1, -0.2, 0.3]);
    let var = Array::from_vec(vec![1.5, 0.7, 2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let gamma0 = rand_arr(&[3], &mut rng);
    let beta0 = rand_arr(&[3], &mut rng);
    check_grad(&[4, 2, 2, 3], 28, 1e-6, "batchnorm eval x", &move |g, x| {
        let ga = g.leaf(gamma0.clone());
        let be = g.leaf(beta0.clone());
        let y = g.batchnorm_eval(x, ga, be, &mean, &var, 1e-5);
        let y = g.sigmoid(y);
        g.mean_all(y)
    });
}

#[test]
fn grad_softmax_ce() {
    let labels = vec![0usize, 2, 1, 2];
    check_grad(&[4, 3], 29, 1e-6, "softmax ce", &move |g, x| {
        g.softmax_ce_mean(x, &labels)
    });
}

#[test]
fn grad_bce_logits() {
    check_grad(&[6, 1], 30, 1e-6, "bce target 1", &|g, x| {
        g.bce_logits_mean(x, 1.0)
    });
    check_grad(&[6, 1], 31, 1e-6, "bce target 0", &|g, x| {
        g.bce_logits_mean(x, 0.0)
    });
}

#[test]
fn grad_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let b0 = rand_arr(&[3, 5], &mut rng);
    check_grad(&[3, 5], 33, 1e-5, "l1 mean", &move |g, x| {
        let b = g.leaf(b0.clone());
        g.l1_mean(x, b)
    });
}

#[test]
fn grad_concat_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let b0 = rand_arr(&[3, 4], &mut rng);
    check_grad(&[3, 2], 35, 1e-6, "concat", &move |g, x| {
        let b = g.leaf(b0.clone());
        let y = g.concat_cols(x, b);
        let y = g.sigmoid(y);
        g.mean_all(y)
    });
    check_grad(&[2, 2, 2, 2], 36, 1e-6, "flatten", &|g, x| {
        let y = g.flatten(x);
        let y = g.sigmoid(y);
        g.mean_all(y)
    });
}

#[test]
fn gradient_reverse_flips_and_scales() {
    // forward is identity
    let mut g = Graph::new();
    let x = g.leaf(ndarray::arr1(&[0.3, -1.2]).into_dyn());
    let y = g.gradient_reverse(x, 1.0);
    assert_eq!(g.value(y), g.value(x));

    // downstream L = sum(y): grad at input should be -1s
    let s = g.mean_all(y);
    let s = g.scale(s, 2.0); // mean * 2 = sum for 2 elements
    let grads = g.backward(s);
    let gx = grads.wrt(x).unwrap();
    assert_eq!(gx, &ndarray::arr1(&[-1.0, -1.0]).into_dyn());

    // grad equals -scale * unreversed grad, elementwise
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..20 {
        let x0 = rand_arr(&[5], &mut rng);
        let q = rand_arr(&[5], &mut rng);
        let scale = rng.gen::<f64>() * 2.0 + 0.1;
        let grad_with = {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone());
            let r = g.gradient_reverse(x, scale);
            let qv = g.leaf(q.clone());
            let prod = g.sub(r, qv);
            let sq = g.l1_mean(prod, qv);
            let grads = g.backward(sq);
            grads.wrt(x).unwrap().clone()
        };
        let grad_without = {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone());
            let qv = g.leaf(q.clone());
            let prod = g.sub(x, qv);
            let sq = g.l1_mean(prod, qv);
            let grads = g.backward(sq);
            grads.wrt(x).unwrap().clone()
        };
        let expected = grad_without.mapv(|v| -scale * v);
        assert_close(&grad_with, &expected, 1e-12, "grl scaling");
    }
}

#[test]
fn gradient_reverse_quadratic_matches_fd() {
    // scale=0.5, L = sum(y^2) at v=[2.0]: reversed analytic grad is -2.0
    let mut g = Graph::new();
    let x = g.leaf(arr0(2.0).into_dyn().into_shape_with_order(IxDyn(&[1])).unwrap());
    let y = g.gradient_reverse(x, 0.5);
    let y2 = g.leaf(ndarray::arr1(&[0.0]).into_dyn());
    let d = g.sub(y, y2);
    // sum(y^2) via l1 against zero won't square; build y*y with mul via matmul
    let dm = g.reshape(d, &[1, 1]);
    let dt = g.reshape(d, &[1, 1]);
    let sq = g.matmul(dm, dt);
    let loss = g.mean_all(sq);
    let grads = g.backward(loss);
    let analytic = grads.wrt(x).unwrap()[[0]];
    assert!((analytic - (-2.0)).abs() < 1e-12, "analytic {analytic}");

    // forward-only surrogate for FD: L(v) = v^2 (reversal does not affect forward)
    let f = |v: f64| v * v;
    let eps = 1e-5;
    let fd = (f(2.0 + eps) - f(2.0 - eps)) / (2.0 * eps);
    // analytic == -scale * fd within 1e-4 relative
    assert!(((-0.5 * fd) - analytic).abs() / fd.abs() < 1e-4);
}

#[test]
fn detach_blocks_gradients() {
    let mut g = Graph::new();
    let x = g.leaf(ndarray::arr1(&[1.0, 2.0]).into_dyn());
    let d = g.detach(x);
    let y = g.mean_all(d);
    let grads = g.backward(y);
    assert!(grads.wrt(x).is_none());
    assert_eq!(g.value(d), g.value(x));
}

#[test]
fn weighted_sum_combines_scalars() {
    let mut g = Graph::new();
    let a = g.leaf(arr0(2.0).into_dyn());
    let b = g.leaf(arr0(3.0).into_dyn());
    let s = g.weighted_sum(&[(0.5, a), (2.0, b)]);
    assert!((g.scalar(s) - 7.0).abs() < 1e-12);
    let grads = g.backward(s);
    assert!((grads.wrt(a).unwrap()[[]] - 0.5).abs() < 1e-12);
    assert!((grads.wrt(b).unwrap()[[]] - 2.0).abs() < 1e-12);
}

#[test]
fn harvest_collects_named_params() {
    let mut g = Graph::new();
    let w = g.named_param("layer.w", ndarray::arr1(&[1.0, -1.0]).into_dyn());
    let x = g.leaf(ndarray::arr1(&[3.0, 4.0]).into_dyn());
    let y = g.add(w, x);
    let loss = g.mean_all(y);
    let grads = g.backward(loss);
    let h = g.harvest(&grads);
    assert_eq!(h.len(), 1);
    assert_eq!(h["layer.w"], ndarray::arr1(&[0.5, 0.5]).into_dyn());
}

#[test]
fn fan_out_accumulates() {
    // y = x + x => dy/dx = 2
    let mut g = Graph::new();
    let x = g.leaf(ndarray::arr1(&[1.0]).into_dyn());
    let y = g.add(x, x);
    let loss = g.mean_all(y);
    let grads = g.backward(loss);
    assert_eq!(grads.wrt(x).unwrap()[[0]], 2.0);
}
