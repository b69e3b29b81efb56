mod common;

use common::randn;
use ntaa_core::candidates::{OperationInstance, OperationKind, WeightSource};
use ntaa_core::rng::rng_for;
use ntaa_core::tensor::{Mode, ParamStore, Session, Tensor};
use OperationKind::*;

fn run(
    op: &OperationInstance,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    seed: u64,
) -> Tensor<f64> {
    let mut rng = rng_for(seed, 5);
    let mut s = Session::new(store, mode, &mut rng);
    let xv = s.input(x.clone());
    let y = op.apply(&mut s, xv).unwrap();
    s.graph.value(y).clone()
}

fn make(kind: OperationKind, c: usize, seed: u64) -> (OperationInstance, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let op = OperationInstance::init(
        &mut store,
        "n",
        kind,
        c,
        &mut rng_for(seed, 3),
        &WeightSource::HeNormal,
    )
    .unwrap();
    (op, store)
}

#[test]
fn identity_and_eval_noise_pass_through() {
    let x: Tensor<f64> = randn(&[2, 3, 4, 4], 1);
    for kind in [Identity, NoiseDisturb] {
        let (op, store) = make(kind, 3, 0);
        assert!(run(&op, &store, &x, Mode::Eval, 0).bitwise_eq(&x), "{kind}");
    }
    let (op, store) = make(Identity, 3, 0);
    assert!(run(&op, &store, &x, Mode::Train, 0).bitwise_eq(&x));
}

#[test]
fn train_noise_has_configured_scale() {
    let (op, store) = make(NoiseDisturb, 4, 0);
    assert_eq!(op.noise_sigma(&store), Some(0.1));
    let x = Tensor::<f64>::zeros(&[25, 4, 10, 10]);
    let y = run(&op, &store, &x, Mode::Train, 7);
    let n = y.numel() as f64;
    let mean = y.data().iter().sum::<f64>() / n;
    let std = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.02, "{mean}");
    assert!((std - 0.1).abs() <= 0.02, "{std}");
    assert!(!run(&op, &store, &x, Mode::Train, 8).bitwise_eq(&y));
}

#[test]
fn he_normal_kernel_std() {
    let (op, store) = make(Conv3, 8, 4);
    let k = store.get(op.weights.unwrap().kernel);
    assert_eq!(k.numel(), 576);
    let n = k.numel() as f64;
    let mean = k.data().iter().sum::<f64>() / n;
    let std = (k.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let want = (2.0f64 / 72.0).sqrt();
    assert!((std / want - 1.0).abs() <= 0.15, "{std} vs {want}");
}

#[test]
fn weight_free_kinds_own_nothing() {
    for kind in [MaxPool3, AvgPool3, Globalization, Identity] {
        let (op, store) = make(kind, 4, 0);
        assert!(op.weights.is_none());
        assert_eq!(op.param_count(), 0);
        assert!(store.is_empty(), "{kind}");
    }
}

#[test]
fn pretrained_weights_are_copied_bitwise() {
    let (src_op, src) = make(Conv5, 3, 9);
    let mut store = ParamStore::<f64>::new();
    let op = OperationInstance::init(
        &mut store,
        "n",
        Conv5,
        3,
        &mut rng_for(1, 1),
        &WeightSource::Pretrained(&src),
    )
    .unwrap();
    for (a, b) in op.weights.unwrap().ids().iter().zip(src_op.weights.unwrap().ids()) {
        assert!(store.get(*a).bitwise_eq(src.get(b)));
    }
}

#[test]
fn every_op_preserves_shape() {
    let x: Tensor<f64> = randn(&[2, 4, 5, 3], 2);
    for kind in OperationKind::ALL {
        let (op, store) = make(kind, 4, 0);
        assert_eq!(run(&op, &store, &x, Mode::Train, 0).shape(), x.shape(), "{kind}");
    }
}
