//! Finite-difference audit of every differentiable primitive and of the full search loss,
//! in `f64`. Shared by the CLI `gradcheck` command and the test suites.

use rand::Rng;

use crate::arch::{Backbone, DiscreteArchitecture};
use crate::candidates::OperationKind;
use crate::error::{NtaaError, Result};
use crate::objective::{infonce, ntaa_loss, op_regularizer, LossConfig};
use crate::rng::{normal, rng_for, NtaaRng};
use crate::supernet::SuperNet;
use crate::tensor::{rel_err, Graph, Mode, ParamId, Session, Tensor, Var, DEFAULT_FD_STEP};

/// Largest tolerated relative error.
pub const GRAD_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub op: &'static str,
    pub seed: u64,
    pub rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err <= GRAD_TOL
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn randn(shape: &[usize], rng: &mut NtaaRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| normal(rng))
}

/// Random linear read-out so the upstream gradient is generic.
fn project(g: &mut Graph<f64>, y: Var, rng: &mut NtaaRng) -> Result<Var> {
    let n = g.value(y).numel();
    g.dot_const(y, (0..n).map(|_| normal(rng)).collect())
}

/// Worst relative error over all `inputs` between `backward` and central differences.
fn check_inputs(inputs: &[Tensor<f64>], build: &Build<'_>) -> Result<f64> {
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vs)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vs)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, v) in vs.iter().enumerate() {
        let analytic =
            grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let xi = inputs[k].data()[i];
            let h = DEFAULT_FD_STEP * xi.abs().max(1.0);
            probe[k].data_mut()[i] = xi + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = xi - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = xi;
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn conv_check(size: usize, seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, 0x6701);
    let inputs =
        [randn(&[2, 3, 5, 5], &mut r), randn(&[4, 3, size, size], &mut r), randn(&[4], &mut r)];
    check_inputs(&inputs, &|g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]))?;
        project(g, y, &mut rng_for(seed, 0x6702))
    })
}

fn unary_check(
    seed: u64,
    shape: &[usize],
    op: fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<f64> {
    let mut r = rng_for(seed, 0x6703);
    check_inputs(&[randn(shape, &mut r)], &|g, v| {
        let y = op(g, v[0])?;
        project(g, y, &mut rng_for(seed, 0x6704))
    })
}

fn bn_relu_check(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, 0x6705);
    let inputs = [randn(&[3, 2, 3, 3], &mut r), randn(&[2], &mut r), randn(&[2], &mut r)];
    check_inputs(&inputs, &|g, v| {
        let (y, _) = g.bn_relu(v[0], v[1], v[2], &[0.0; 2], &[1.0; 2], Mode::Train)?;
        project(g, y, &mut rng_for(seed, 0x6706))
    })
}

fn cross_entropy_check(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, 0x6707);
    let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 5).collect();
    check_inputs(&[randn(&[4, 5], &mut r)], &|g, v| g.cross_entropy(v[0], &labels))
}

/// Raw embeddings are normalized on the tape, so the unit-norm precondition holds under perturbation.
fn infonce_check(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, 0x6708);
    let inputs = [randn(&[3, 4], &mut r), randn(&[3, 4], &mut r), randn(&[5, 4], &mut r)];
    check_inputs(&inputs, &|g, v| {
        let q = g.l2_normalize_rows(v[0])?;
        let k = g.l2_normalize_rows(v[1])?;
        let n = g.l2_normalize_rows(v[2])?;
        infonce(g, q, k, n, 0.2)
    })
}

fn op_regularizer_check(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, 0x6709);
    let mask: Vec<Vec<bool>> =
        (0..3).map(|n| (0..8).map(|i| i == (n + seed as usize) % 8).collect()).collect();
    let inputs: Vec<Tensor<f64>> = (0..3).map(|_| randn(&[8], &mut r)).collect();
    check_inputs(&inputs, &|g, v| op_regularizer(g, v, &mask))
}

type Grads = Vec<(ParamId, Vec<f64>)>;

/// The full objective, weight norm included, through a three-node supernet holding all
/// eight candidates, differentiated w.r.t. every θ and β entry and a random sample of weight entries.
fn supernet_check(seed: u64) -> Result<f64> {
    let backbone = Backbone { in_channels: 2, widths: vec![3], nodes: vec![3], num_classes: 3 };
    let alpha0 = DiscreteArchitecture::uniform(backbone, OperationKind::Conv3);
    let mut net = SuperNet::<f64>::init_random(&alpha0, &OperationKind::ALL, seed)?;
    let mut r = rng_for(seed, 0x670a);
    for id in net.theta_ids().into_iter().chain(net.beta_ids()) {
        for v in net.store.get_mut(id).data_mut() {
            *v = normal(&mut r);
        }
    }
    let x = randn(&[3, 2, 4, 4], &mut r);
    let labels = [0usize, 1, 2];
    let cfg = LossConfig { lambda: 0.05, ..LossConfig::new(net.alpha0_mask()) };
    let theta_ids = net.theta_ids();
    let decayable: Vec<ParamId> =
        net.store.iter().filter(|(_, p)| p.kind.decayable()).map(|(id, _)| id).collect();

    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for id in theta_ids.iter().chain(&net.beta_ids()) {
        coords.extend((0..net.store.get(*id).numel()).map(|i| (*id, i)));
    }
    let gates = coords.len();
    let weights: Vec<ParamId> = net
        .store
        .iter()
        .filter(|(id, p)| p.trainable() && !coords[..gates].iter().any(|(g, _)| g == id))
        .map(|(id, _)| id)
        .collect();
    for _ in 0..16 {
        let id = weights[r.random_range(0..weights.len())];
        coords.push((id, r.random_range(0..net.store.get(id).numel())));
    }

    let run = |net: &SuperNet<f64>, grad: bool| -> Result<(f64, Grads)> {
        let mut rng = rng_for(seed, 0x670b);
        let mut s = Session::new(&net.store, Mode::Train, &mut rng);
        let xv = s.input(x.clone());
        let logits = net.forward(&mut s, xv)?;
        let thetas: Vec<Var> = theta_ids.iter().map(|&id| s.var(id)).collect();
        let weights: Vec<Var> = decayable.iter().map(|&id| s.var(id)).collect();
        let loss = ntaa_loss(&mut s.graph, logits, &labels, &weights, &thetas, &cfg)?;
        if grad {
            let out = s.backward(loss)?;
            Ok((out.loss, out.grads))
        } else {
            Ok((s.graph.value(loss).item(), Vec::new()))
        }
    };
    let (_, grads) = run(&net, true)?;
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &(id, i) in &coords {
        let g = grads.iter().find(|(gid, _)| *gid == id).map_or(0.0, |(_, g)| g[i]);
        analytic.push(g);
        let xi = net.store.get(id).data()[i];
        let h = DEFAULT_FD_STEP * xi.abs().max(1.0);
        net.store.get_mut(id).data_mut()[i] = xi + h;
        let up = run(&net, false)?.0;
        net.store.get_mut(id).data_mut()[i] = xi - h;
        let down = run(&net, false)?.0;
        net.store.get_mut(id).data_mut()[i] = xi;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(rel_err(&analytic, &numeric))
}

/// Names of the audited operations, in report order.
pub const OPS: [&str; 13] = [
    "conv5",
    "conv3",
    "conv1",
    "max_pool3",
    "avg_pool3",
    "globalization",
    "global_avg_pool",
    "bn_relu",
    "softmax",
    "cross_entropy",
    "infonce",
    "op_regularizer",
    "supernet_loss",
];

pub fn check_op(op: &str, seed: u64) -> Result<f64> {
    match op {
        "conv5" => conv_check(5, seed),
        "conv3" => conv_check(3, seed),
        "conv1" => conv_check(1, seed),
        "max_pool3" => unary_check(seed, &[2, 2, 4, 5], |g, x| g.max_pool3(x)),
        "avg_pool3" => unary_check(seed, &[2, 2, 4, 5], |g, x| g.avg_pool3(x)),
        "globalization" => unary_check(seed, &[2, 3, 3, 4], |g, x| g.global_avg_broadcast(x)),
        "global_avg_pool" => unary_check(seed, &[2, 3, 3, 4], |g, x| g.global_avg_pool(x)),
        "bn_relu" => bn_relu_check(seed),
        "softmax" => unary_check(seed, &[3, 6], |g, x| g.softmax(x)),
        "cross_entropy" => cross_entropy_check(seed),
        "infonce" => infonce_check(seed),
        "op_regularizer" => op_regularizer_check(seed),
        "supernet_loss" => supernet_check(seed),
        _ => Err(NtaaError::arg(format!("unknown op `{op}`"))),
    }
}

/// Every op over seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::with_capacity(OPS.len() * seeds as usize);
    for op in OPS {
        for seed in 0..seeds {
            out.push(GradCheck { op, seed, rel_err: check_op(op, seed)? });
        }
    }
    Ok(out)
}
