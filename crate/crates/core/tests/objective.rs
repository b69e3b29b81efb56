use ntaa_core::objective::{
    infonce, infonce_in_batch, ntaa_loss, op_regularizer, op_regularizer_value, LossConfig,
};
use ntaa_core::rng::rng_for;
use ntaa_core::tensor::{Graph, Mode, ParamKind, ParamStore, Schedule, Session, SgdState, Tensor};
use ntaa_core::NtaaError;

fn unit(d: usize, i: usize) -> Vec<f64> {
    (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
}

fn rows(rs: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(&[rs.len(), rs[0].len()], rs.concat()).unwrap()
}

fn alpha0_mask(nodes: usize, at: usize) -> Vec<Vec<bool>> {
    vec![(0..8).map(|i| i == at).collect(); nodes]
}

#[test]
fn infonce_aligned_positive_orthogonal_negatives() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(rows(&[unit(5, 0)]));
    let k = g.constant(rows(&[unit(5, 0)]));
    let neg = g.constant(rows(&[unit(5, 1), unit(5, 2), unit(5, 3), unit(5, 4)]));
    let l = infonce(&mut g, q, k, neg, 0.2).unwrap();
    let want = (1.0 + 4.0 * (-5.0f64).exp()).ln();
    assert!((g.value(l).item() - want).abs() < 1e-6);
    assert!((want - 0.02659).abs() < 1e-5);
}

#[test]
fn infonce_all_orthogonal_is_log_one_plus_m() {
    for m in [1usize, 3, 6] {
        let mut g = Graph::<f64>::new();
        let q = g.constant(rows(&[unit(8, 0)]));
        let k = g.constant(rows(&[unit(8, 1)]));
        let negs: Vec<Vec<f64>> = (0..m).map(|i| unit(8, 2 + i)).collect();
        let neg = g.constant(rows(&negs));
        let l = infonce(&mut g, q, k, neg, 0.2).unwrap();
        assert!((g.value(l).item() - ((1 + m) as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn infonce_ignores_negative_order() {
    let mut r = rng_for(1, 1);
    let mut norm_rows = |n: usize| {
        let raw: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..4).map(|_| ntaa_core::rng::normal(&mut r)).collect();
                let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        raw
    };
    let (q, k, negs) = (norm_rows(2), norm_rows(2), norm_rows(5));
    let eval = |negs: &[Vec<f64>]| {
        let mut g = Graph::<f64>::new();
        let (qv, kv, nv) = (g.constant(rows(&q)), g.constant(rows(&k)), g.constant(rows(negs)));
        let l = infonce(&mut g, qv, kv, nv, 0.2).unwrap();
        g.value(l).item()
    };
    let mut rev = negs.clone();
    rev.reverse();
    assert!((eval(&negs) - eval(&rev)).abs() < 1e-12);
}

#[test]
fn infonce_rejects_unnormalized_rows() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(rows(&[vec![2.0, 0.0]]));
    let k = g.constant(rows(&[vec![1.0, 0.0]]));
    let n = g.constant(rows(&[vec![0.0, 1.0]]));
    assert!(matches!(infonce(&mut g, q, k, n, 0.2), Err(NtaaError::Argument(_))));
}

#[test]
fn in_batch_negatives_match_explicit_form() {
    // Two orthogonal pairs: each query sees its positive at similarity 1 and one negative at 0.
    let mut g = Graph::<f64>::new();
    let q = g.constant(rows(&[unit(3, 0), unit(3, 1)]));
    let k = g.constant(rows(&[unit(3, 0), unit(3, 1)]));
    let l = infonce_in_batch(&mut g, q, k, None, 0.2).unwrap();
    assert!((g.value(l).item() - (1.0 + (-5.0f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn regularizer_zero_and_init_cases() {
    let mask = alpha0_mask(3, 1);
    let zeros = vec![Tensor::<f64>::zeros(&[8]); 3];
    assert_eq!(op_regularizer_value(&zeros, &mask).unwrap(), 0.0);
    let init: Vec<Tensor<f64>> =
        (0..3).map(|_| Tensor::from_fn(&[8], |i| if i == 1 { 1.0 } else { 0.0 })).collect();
    assert_eq!(op_regularizer_value(&init, &mask).unwrap(), 3.0);
}

#[test]
fn regularizer_gradient_is_plus_minus_lambda() {
    let lambda = 1e-4;
    let mask = alpha0_mask(2, 3);
    let mut g = Graph::<f64>::new();
    let ths: Vec<_> =
        (0..2).map(|i| g.param(Tensor::from_fn(&[8], |j| (i * 8 + j) as f64 * 0.1))).collect();
    let r = op_regularizer(&mut g, &ths, &mask).unwrap();
    let l = g.scale(r, lambda).unwrap();
    let grads = g.backward(l).unwrap();
    for th in ths {
        for (j, &d) in grads.get(th).unwrap().iter().enumerate() {
            assert_eq!(d, if j == 3 { lambda } else { -lambda });
        }
    }
}

#[test]
fn zero_lambda_is_plain_cross_entropy() {
    let logits = Tensor::<f64>::new(&[2, 3], vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap();
    let labels = [1, 0];
    let mut g = Graph::new();
    let lv = g.constant(logits.clone());
    let ce = g.cross_entropy(lv, &labels).unwrap();
    let th = g.constant(Tensor::full(&[8], 2.0));
    let w = g.constant(Tensor::full(&[4], 3.0));
    let cfg = LossConfig { lambda: 0.0, ..LossConfig::new(alpha0_mask(1, 0)) };
    let full = ntaa_loss(&mut g, lv, &labels, &[w], &[th], &cfg).unwrap();
    assert_eq!(g.value(full).item(), g.value(ce).item());

    let cfg = LossConfig { lambda: 0.5, ..cfg };
    let full = ntaa_loss(&mut g, lv, &labels, &[w], &[th], &cfg).unwrap();
    // ||W||² = 36, regularizer = 2 - 7*2 = -12.
    assert!((g.value(full).item() - (g.value(ce).item() + 0.5 * (36.0 - 12.0))).abs() < 1e-12);
}

#[test]
fn regularizer_steps_move_mass_off_alpha0() {
    let lambda = 1e-2;
    let mask = alpha0_mask(3, 1);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = (0..3)
        .map(|n| {
            let t = Tensor::from_fn(&[8], |i| if i == 1 { 1.0 } else { 0.0 });
            store.add(format!("node{}.theta", n + 1), ParamKind::Arch, t).unwrap()
        })
        .collect();
    let mut opt = SgdState::new(0.1, 0.9, 0.0, Schedule::Constant).unwrap();
    let sums = |s: &ParamStore<f64>| {
        ids.iter().fold((0.0, 0.0), |(a, o), &id| {
            let d = s.get(id).data();
            (a + d[1], o + d.iter().sum::<f64>() - d[1])
        })
    };
    let mut last = sums(&store);
    let mut rng = rng_for(0, 0);
    for step in 0..50 {
        let mut s = Session::new(&store, Mode::Train, &mut rng);
        let ths: Vec<_> = ids.iter().map(|&id| s.var(id)).collect();
        let r = op_regularizer(&mut s.graph, &ths, &mask).unwrap();
        let l = s.graph.scale(r, lambda).unwrap();
        let out = s.backward(l).unwrap();
        store.zero_grad();
        store.accumulate(&out.grads).unwrap();
        opt.step(&mut store, step).unwrap();
        let now = sums(&store);
        assert!(now.0 < last.0 && now.1 > last.1, "step {step}: {last:?} -> {now:?}");
        last = now;
    }
}
