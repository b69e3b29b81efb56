use ntaa_core::rng::{normal, rng_for};
use ntaa_core::tensor::{finite_diff_grad, rel_err, Graph, Mode, Tensor, Var, DEFAULT_FD_STEP};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng_for(seed, 99);
    Tensor::from_fn(shape, |_| normal(&mut r))
}

/// Analytic gradient of `build(x)` w.r.t. `x` vs central differences.
fn grad_err(x: &Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let loss = build(&mut g, v);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(v).unwrap().to_vec();
    let numeric = finite_diff_grad(
        |t| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let l = build(&mut g, v);
            g.value(l).item()
        },
        x,
        DEFAULT_FD_STEP,
    );
    rel_err(&analytic, numeric.data())
}

/// Random linear read-out so gradients are not degenerate.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let n = g.value(y).numel();
    let mut r = rng_for(seed, 7);
    let coeffs = (0..n).map(|_| normal(&mut r)).collect();
    g.dot_const(y, coeffs).unwrap()
}

#[test]
fn conv1x1_identity_kernel_is_identity() {
    let x = randn(&[2, 3, 4, 4], 1);
    let mut k = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k), g.constant(Tensor::zeros(&[3])));
    let y = g.conv2d(xv, kv, Some(bv)).unwrap();
    assert!(g.value(y).bitwise_eq(&x));
}

#[test]
fn conv3_of_ones_counts_in_bounds_taps() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, k, None).unwrap();
    let d = g.value(y).data();
    assert_eq!(d[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(d[corner], 4.0);
    }
    assert_eq!(d[1], 6.0);
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 2, 3, 3]));
    let k = g.constant(Tensor::ones(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, k, None), Err(ntaa_core::NtaaError::Shape(_))));
}

#[test]
fn conv_kernel_gradient_matches_finite_differences() {
    for s in [1usize, 3, 5] {
        for seed in 0..5 {
            let x = randn(&[2, 3, 5, 5], seed);
            let k = randn(&[4, 3, s, s], seed + 100);
            let err = grad_err(&k, |g, kv| {
                let xv = g.constant(x.clone());
                let y = g.conv2d(xv, kv, None).unwrap();
                g.sum(y).unwrap()
            });
            assert!(err <= 1e-5, "s={s} seed={seed} err={err}");
            let err_x = grad_err(&x, |g, xv| {
                let kv = g.constant(k.clone());
                let y = g.conv2d(xv, kv, None).unwrap();
                project(g, y, seed)
            });
            assert!(err_x <= 1e-5, "s={s} seed={seed} err_x={err_x}");
        }
    }
}

#[test]
fn strided_conv_gradients() {
    let x = randn(&[2, 2, 6, 6], 3);
    let k = randn(&[3, 2, 3, 3], 4);
    let b = randn(&[3], 5);
    let err = grad_err(&x, |g, xv| {
        let kv = g.constant(k.clone());
        let bv = g.constant(b.clone());
        let y = g.conv2d_strided(xv, kv, Some(bv), 2).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3, 3]);
        project(g, y, 1)
    });
    assert!(err <= 1e-5, "{err}");
    let err_b = grad_err(&b, |g, bv| {
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let y = g.conv2d_strided(xv, kv, Some(bv), 2).unwrap();
        project(g, y, 2)
    });
    assert!(err_b <= 1e-5, "{err_b}");
}

#[test]
fn avg_pool_keeps_constants() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 2, 4, 5], 0.7));
    let y = g.avg_pool3(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn max_pool_small_example() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.max_pool3(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 4.0, 4.0, 4.0]);
}

/// Brute force: count, for every cell, the windows whose (first) maximum it is.
fn window_argmax_counts(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut counts = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let mut best: Option<usize> = None;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xw) = (y + dy, xx + dx);
                    if yy < 0 || xw < 0 || yy >= h as isize || xw >= w as isize {
                        continue;
                    }
                    let idx = (yy as usize) * w + xw as usize;
                    best = match best {
                        Some(b) if x[b] > x[idx] || (x[b] == x[idx] && b < idx) => Some(b),
                        _ => Some(idx),
                    };
                }
            }
            counts[best.unwrap()] += 1.0;
        }
    }
    counts
}

#[test]
fn max_pool_gradient_counts_windows() {
    for seed in 0..10 {
        let mut x = randn(&[1, 1, 5, 6], seed);
        // Introduce ties to exercise the lowest-index rule.
        x.data_mut()[7] = x.data()[8];
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = g.max_pool3(xv).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(xv).unwrap(), window_argmax_counts(x.data(), 5, 6).as_slice());
    }
}

#[test]
fn pooling_gradients_match_finite_differences() {
    for seed in 0..5 {
        let x = randn(&[2, 2, 4, 5], seed);
        assert!(
            grad_err(&x, |g, v| {
                let y = g.avg_pool3(v).unwrap();
                project(g, y, seed)
            }) <= 1e-6
        );
        assert!(
            grad_err(&x, |g, v| {
                let y = g.max_pool3(v).unwrap();
                project(g, y, seed)
            }) <= 1e-6
        );
    }
}

#[test]
fn global_average_broadcast_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let y = g.global_avg_broadcast(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0; 4]);
    let z = g.global_avg_broadcast(y).unwrap();
    assert!(g.value(z).bitwise_eq(g.value(y)));
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    for v in grads.get(x).unwrap() {
        assert!((v - 1.0).abs() < 1e-15);
    }
    let xr = randn(&[2, 3, 3, 4], 9);
    let fd = finite_diff_grad(
        |t| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let y = g.global_avg_broadcast(v).unwrap();
            g.value(y).data().iter().sum()
        },
        &xr,
        DEFAULT_FD_STEP,
    );
    assert!(fd.data().iter().all(|v| (v - 1.0).abs() < 1e-8));
}

#[test]
fn bn_relu_eval_identity_normalisation_is_relu() {
    let x = randn(&[2, 3, 2, 2], 4);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::ones(&[3]));
    let beta = g.constant(Tensor::zeros(&[3]));
    let (y, stats) = g.bn_relu(xv, gamma, beta, &[0.0; 3], &[1.0; 3], Mode::Eval).unwrap();
    assert!(stats.is_none());
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b.max(0.0) * scale).abs() < 1e-12);
        assert!((a - b.max(0.0)).abs() < 1e-5 * b.abs().max(1.0));
    }
}

#[test]
fn bn_train_normalises_per_channel() {
    let x = randn(&[4, 2, 3, 3], 5);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::ones(&[2]));
    // Large beta keeps every pre-activation positive so ReLU is transparent.
    let beta = g.constant(Tensor::full(&[2], 100.0));
    let (y, stats) = g.bn_relu(xv, gamma, beta, &[0.0; 2], &[1.0; 2], Mode::Train).unwrap();
    assert!(stats.is_some());
    let d = g.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| d[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].iter().map(|v| v - 100.0))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn bn_single_sample_constant_does_not_divide_by_zero() {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
    let gamma = g.constant(Tensor::ones(&[1]));
    let beta = g.constant(Tensor::zeros(&[1]));
    let (y, _) = g.bn_relu(xv, gamma, beta, &[0.0], &[1.0], Mode::Train).unwrap();
    assert_eq!(g.value(y).data(), &[0.0]);
}

#[test]
fn bn_relu_gradients_match_finite_differences() {
    for seed in 0..5 {
        let x = randn(&[3, 2, 3, 3], seed);
        let gamma = randn(&[2], seed + 10);
        let beta = randn(&[2], seed + 20);
        for mode in [Mode::Train, Mode::Eval] {
            let err = grad_err(&x, |g, v| {
                let gv = g.constant(gamma.clone());
                let bv = g.constant(beta.clone());
                let (y, _) = g.bn_relu(v, gv, bv, &[0.1, -0.2], &[1.5, 0.7], mode).unwrap();
                project(g, y, seed)
            });
            assert!(err <= 1e-4, "{mode:?} seed {seed}: {err}");
            let err_g = grad_err(&gamma, |g, gv| {
                let xv = g.constant(x.clone());
                let bv = g.constant(beta.clone());
                let (y, _) = g.bn_relu(xv, gv, bv, &[0.1, -0.2], &[1.5, 0.7], mode).unwrap();
                project(g, y, seed)
            });
            assert!(err_g <= 1e-4, "{mode:?} seed {seed}: {err_g}");
        }
    }
}

#[test]
fn softmax_and_cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::full(&[8], 0.3));
    let p = g.softmax(v).unwrap();
    assert!(g.value(p).data().iter().all(|&x| (x - 0.125).abs() < 1e-15));
    let logits = g.constant(Tensor::full(&[5, 6], 1.2));
    let ce = g.cross_entropy(logits, &[0, 1, 2, 3, 5]).unwrap();
    assert!((g.value(ce).item() - 6f64.ln()).abs() < 1e-12);
    let empty = g.constant(Tensor::new(&[0, 3], vec![]).unwrap());
    assert!(matches!(g.cross_entropy(empty, &[]), Err(ntaa_core::NtaaError::Argument(_))));
    let z = g.constant(Tensor::zeros(&[4]));
    let l2 = g.l2_sq(&[z]).unwrap();
    assert_eq!(g.value(l2).item(), 0.0);
}

#[test]
fn softmax_and_ce_gradients() {
    for seed in 0..5 {
        let v = randn(&[3, 8], seed);
        assert!(
            grad_err(&v, |g, x| {
                let p = g.softmax(x).unwrap();
                project(g, p, seed)
            }) <= 1e-6
        );
        assert!(grad_err(&v, |g, x| g.cross_entropy(x, &[1, 7, 0]).unwrap()) <= 1e-6);
    }
}

#[test]
fn backward_of_sum_is_ones_and_detached_gets_nothing() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap());
    let d = g.detach(x);
    let y = g.add(x, d).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);
    assert!(grads.get(d).is_none());
    assert!(matches!(g.backward(y), Err(ntaa_core::NtaaError::Argument(_))));
}

#[test]
fn two_layer_net_gradient() {
    for seed in 0..5 {
        let x = randn(&[2, 3, 4, 4], seed);
        let k1 = randn(&[4, 3, 3, 3], seed + 1);
        let k2 = randn(&[4, 4, 1, 1], seed + 2);
        let w = randn(&[5, 4], seed + 3);
        let b = randn(&[5], seed + 4);
        let net = |g: &mut Graph<f64>, k1v: Var| {
            let xv = g.constant(x.clone());
            let k2v = g.constant(k2.clone());
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let h = g.conv2d(xv, k1v, None).unwrap();
            let h = g.relu(h).unwrap();
            let h = g.conv2d(h, k2v, None).unwrap();
            let h = g.global_avg_pool(h).unwrap();
            let logits = g.linear(h, wv, bv).unwrap();
            g.cross_entropy(logits, &[1, 4]).unwrap()
        };
        let err = grad_err(&k1, net);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn forward_is_bitwise_reproducible() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.constant(randn(&[2, 3, 6, 6], 2).cast());
        let k = g.constant(randn(&[5, 3, 5, 5], 3).cast());
        let y = g.conv2d(x, k, None).unwrap();
        let y = g.max_pool3(y).unwrap();
        g.value(y).clone()
    };
    assert!(run().bitwise_eq(&run()));
}

#[test]
fn narrow_precision_tracks_wide_precision() {
    let x = randn(&[2, 3, 6, 6], 11);
    let k = randn(&[4, 3, 3, 3], 12);
    let wide = {
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(a, b, None).unwrap();
        g.value(y).clone()
    };
    let narrow = {
        let mut g = Graph::<f32>::new();
        let (a, b) = (g.constant(x.cast()), g.constant(k.cast()));
        let y = g.conv2d(a, b, None).unwrap();
        g.value(y).cast::<f64>()
    };
    assert!(rel_err(wide.data(), narrow.data()) <= 1e-2);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
            let mut g = Graph::<f64>::new();
            let n = v.len();
            let x = g.constant(Tensor::new(&[n], v).unwrap());
            let p = g.softmax(x).unwrap();
            let d = g.value(p).data();
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(d.iter().all(|&q| q > 0.0 && q < 1.0 || n == 1));
        }

        #[test]
        fn globalization_output_is_spatially_constant(seed in 0u64..1000, h in 1usize..5, w in 1usize..5) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(randn(&[2, 2, h, w], seed));
            let y = g.global_avg_broadcast(x).unwrap();
            for plane in g.value(y).data().chunks(h * w) {
                prop_assert!(plane.iter().all(|&v| v.to_bits() == plane[0].to_bits()));
            }
        }
    }
}
