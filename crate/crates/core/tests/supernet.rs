mod common;

use common::{randn, tiny_backbone, tiny_cfg, tiny_data};
use ntaa_core::arch::DiscreteArchitecture;
use ntaa_core::candidates::{OperationInstance, OperationKind};
use ntaa_core::network::Network;
use ntaa_core::pipeline::pretrain_source;
use ntaa_core::rng::rng_for;
use ntaa_core::supernet::{selection_probs, MixedNode, SuperNet};
use ntaa_core::tensor::{Mode, ParamKind, Session, Tensor};
use OperationKind::*;

fn eval_logits<T: ntaa_core::tensor::Element>(
    store: &ntaa_core::tensor::ParamStore<T>,
    x: &Tensor<T>,
    f: impl Fn(&mut Session<'_, T>, ntaa_core::tensor::Var) -> ntaa_core::Result<ntaa_core::tensor::Var>,
) -> Tensor<T> {
    let mut rng = rng_for(0, 0);
    let mut s = Session::new(store, Mode::Eval, &mut rng);
    let xv = s.input(x.clone());
    let y = f(&mut s, xv).unwrap();
    s.graph.value(y).clone()
}

fn random_supernet(seed: u64) -> SuperNet<f64> {
    let alpha0 = DiscreteArchitecture::uniform(tiny_backbone(), Conv3);
    SuperNet::init_random(&alpha0, &OperationKind::ALL, seed).unwrap()
}

#[test]
fn equal_logits_give_uniform_probs() {
    let p = selection_probs(&Tensor::<f64>::full(&[8], 0.3));
    assert!(p.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
}

#[test]
fn probs_are_shift_invariant() {
    let t: Tensor<f64> = randn(&[8], 3);
    let shifted = Tensor::from_fn(&[8], |i| t.data()[i] + 17.5);
    let (a, b) = (selection_probs(&t), selection_probs(&shifted));
    assert!(a.max_abs_diff(&b) <= 1e-9);
}

#[test]
fn saturated_gate_reduces_to_chosen_op() {
    let mut net = random_supernet(1);
    let node = net.nodes[0].clone();
    let chosen = node.kinds().iter().position(|&k| k == Conv1).unwrap();
    let th = net.store.get_mut(node.theta).data_mut();
    th.fill(0.0);
    th[chosen] = 20.0;
    let x: Tensor<f64> = randn(&[2, 4, 6, 6], 5);
    let mixed = eval_logits(&net.store, &x, |s, xv| net.mixed_forward(s, &node, &[xv]));
    let single = eval_logits(&net.store, &x, |s, xv| node.candidates[chosen].apply(s, xv));
    assert!(mixed.max_abs_diff(&single) <= 1e-5, "{}", mixed.max_abs_diff(&single));
}

#[test]
fn node_of_identical_identities_passes_input_through() {
    let mut net = random_supernet(2);
    let theta = net.store.add("test.theta", ParamKind::Arch, Tensor::full(&[2], 1.0)).unwrap();
    let beta = net.store.add("test.beta", ParamKind::Arch, Tensor::zeros(&[1])).unwrap();
    let id = OperationInstance { kind: Identity, channels: 4, weights: None, sigma: None };
    let node =
        MixedNode { index: 1, candidates: vec![id.clone(), id], theta, beta, alpha0_index: 0 };
    let x: Tensor<f64> = randn(&[2, 4, 3, 3], 6);
    let y = eval_logits(&net.store, &x, |s, xv| net.mixed_forward(s, &node, &[xv]));
    assert!(y.max_abs_diff(&x) <= 1e-15);
}

#[test]
fn pretrained_init_keeps_alpha0_exactly() {
    let cfg = tiny_cfg(3);
    let data = tiny_data(3);
    let pre = pretrain_source(&cfg, &data).unwrap();
    let alpha0 = cfg.alpha0().unwrap();
    let net =
        SuperNet::<f32>::init_from_pretrained(&alpha0, &pre.checkpoint, &OperationKind::ALL, 3)
            .unwrap();

    let e = std::f64::consts::E;
    for n in &net.nodes {
        let p = selection_probs(&net.store.get(n.theta).cast::<f64>());
        for (i, &v) in p.data().iter().enumerate() {
            let want = if i == n.alpha0_index { e / (e + 7.0) } else { 1.0 / (e + 7.0) };
            assert!((v - want).abs() < 1e-7);
        }
    }
    assert_eq!(net.discretize(), alpha0);

    let x: Tensor<f32> = randn(&[8, 3, 8, 8], 9);
    let a = eval_logits(&net.store, &x, |s, xv| net.one_hot_forward(s, &alpha0, xv));
    let b = eval_logits(&pre.network.store, &x, |s, xv| pre.network.forward(s, xv));
    assert_eq!(a.shape(), &[8, 4]);
    assert!(a.max_abs_diff(&b) <= 1e-5, "{}", a.max_abs_diff(&b));

    let again =
        SuperNet::<f32>::init_from_pretrained(&alpha0, &pre.checkpoint, &OperationKind::ALL, 3)
            .unwrap();
    for ((_, p), (_, q)) in net.store.iter().zip(again.store.iter()) {
        assert_eq!(p.name, q.name);
        assert!(p.tensor.bitwise_eq(&q.tensor), "{}", p.name);
    }
}

#[test]
fn argmax_and_tie_rules() {
    let mut net = random_supernet(4);
    let n0 = net.nodes[0].clone();
    net.store
        .get_mut(n0.theta)
        .data_mut()
        .copy_from_slice(&[0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(net.discretize().nodes[0].op, Conv1);
    net.store.get_mut(n0.theta).data_mut().fill(0.5);
    assert_eq!(net.discretize().nodes[0].op, Conv3);
    // Equal edge logits pick the nearest predecessor.
    let n1 = net.nodes[1].clone();
    net.store.get_mut(n1.beta).data_mut().fill(0.0);
    assert_eq!(net.discretize().nodes[1].edge, 1);
    net.store.get_mut(n1.beta).data_mut()[1] = 2.0;
    assert_eq!(net.discretize().nodes[1].edge, 0);
}

#[test]
fn extracted_network_matches_one_hot_bitwise() {
    let net = random_supernet(5);
    let b = tiny_backbone();
    let mut arch = DiscreteArchitecture::chain(b, &[Conv5, MaxPool3, Conv1]).unwrap();
    arch.nodes[1].edge = 0;
    let standalone: Network<f64> = net.extract_network(&arch).unwrap();
    let x: Tensor<f64> = randn(&[4, 3, 8, 8], 10);
    let a = eval_logits(&net.store, &x, |s, xv| net.one_hot_forward(s, &arch, xv));
    let c = eval_logits(&standalone.store, &x, |s, xv| standalone.forward(s, xv));
    assert!(a.bitwise_eq(&c));
}

#[test]
fn parameter_count_adds_up() {
    let net = random_supernet(6);
    let b = tiny_backbone();
    let bare: Network<f64> =
        net.extract_network(&DiscreteArchitecture::uniform(b.clone(), Identity)).unwrap();
    let arch = DiscreteArchitecture::chain(b, &[Conv5, AvgPool3, Conv1]).unwrap();
    let full: Network<f64> = net.extract_network(&arch).unwrap();
    // Conv block: c*c*s*s kernel + c bias + 2c BN affine.
    let conv = |c: usize, s: usize| c * c * s * s + 3 * c;
    assert_eq!(full.param_count(), bare.param_count() + conv(4, 5) + conv(8, 1));
    assert_eq!(full.effective_depth(), 2);
    let pools =
        DiscreteArchitecture::chain(tiny_backbone(), &[MaxPool3, AvgPool3, Globalization]).unwrap();
    assert_eq!(pools.effective_depth(), 0);
}

#[test]
fn identity_body_ignores_node_weights() {
    let mut net = random_supernet(7);
    let arch = DiscreteArchitecture::uniform(tiny_backbone(), Identity);
    let x: Tensor<f64> = randn(&[3, 3, 8, 8], 11);
    let before = eval_logits(&net.store, &x, |s, xv| net.one_hot_forward(s, &arch, xv));
    for id in net.candidate_param_ids() {
        for v in net.store.get_mut(id).data_mut() {
            *v += 0.5;
        }
    }
    let after = eval_logits(&net.store, &x, |s, xv| net.one_hot_forward(s, &arch, xv));
    assert!(before.bitwise_eq(&after));
}
