use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ntaa_core::arch::{Backbone, DiscreteArchitecture};
use ntaa_core::candidates::OperationKind;
use ntaa_core::objective::{ntaa_search_loss, LossConfig};
use ntaa_core::rng::{normal, rng_for};
use ntaa_core::supernet::SuperNet;
use ntaa_core::tensor::{Graph, Mode, Session, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng_for(seed, 0);
    Tensor::from_fn(shape, |_| normal(&mut r) as f32)
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for k in [1usize, 3, 5] {
        let x = randn(&[32, 16, 16, 16], 1);
        let w = randn(&[16, 16, k, k], 2);
        let b = randn(&[16], 3);
        group.bench_with_input(BenchmarkId::new("forward", k), &k, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, w, b) =
                    (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
                black_box(g.conv2d(x, w, Some(b)).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", k), &k, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, w, b) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
                let y = g.conv2d(x, w, Some(b)).unwrap();
                let l = g.sum(y).unwrap();
                black_box(g.backward(l).unwrap());
            })
        });
    }
    group.finish();
}

fn supernet_step(c: &mut Criterion) {
    let backbone =
        Backbone { in_channels: 3, widths: vec![8, 16], nodes: vec![2, 2], num_classes: 5 };
    let alpha0 = DiscreteArchitecture::uniform(backbone, OperationKind::Conv3);
    let net = SuperNet::<f32>::init_random(&alpha0, &OperationKind::ALL, 0).unwrap();
    let x = randn(&[32, 3, 16, 16], 4);
    let labels: Vec<usize> = (0..32).map(|i| i % 5).collect();
    let theta = net.theta_ids();
    let cfg = LossConfig::new(net.alpha0_mask());
    c.bench_function("supernet_search_step", |bench| {
        bench.iter(|| {
            let mut rng = rng_for(0, 1);
            let mut s = Session::new(&net.store, Mode::Train, &mut rng);
            let xv = s.input(x.clone());
            let logits = net.forward(&mut s, xv).unwrap();
            let loss = ntaa_search_loss(&mut s, logits, &labels, &theta, &cfg).unwrap();
            black_box(s.backward(loss).unwrap());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, supernet_step
}
criterion_main!(benches);
