#![allow(dead_code)]

use ntaa_core::arch::Backbone;
use ntaa_core::candidates::OperationKind;
use ntaa_core::data::{DomainShift, SyntheticTaskSpec};
use ntaa_core::pipeline::{RunConfig, TransferData};
use ntaa_core::rng::{normal, rng_for};
use ntaa_core::tensor::Tensor;

pub fn tiny_backbone() -> Backbone {
    Backbone { in_channels: 3, widths: vec![4, 8], nodes: vec![2, 1], num_classes: 4 }
}

pub fn tiny_spec(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        image_size: 8,
        channels: 3,
        num_classes: 4,
        target_shift: DomainShift { blur_std: 1.0, noise_std: 0.05, scale: 1.0 },
        source_train: 48,
        source_val: 16,
        target_train: 40,
        target_val: 16,
        seed,
        ..SyntheticTaskSpec::default()
    }
}

pub fn tiny_cfg(seed: u64) -> RunConfig {
    let backbone = tiny_backbone();
    RunConfig {
        seed,
        alpha0_ops: vec![OperationKind::Conv3; backbone.num_nodes()],
        backbone,
        batch_size: 16,
        pretrain_epochs: 2,
        search_epochs: 2,
        finetune_epochs: 2,
        ..RunConfig::default()
    }
}

pub fn tiny_data(seed: u64) -> TransferData {
    TransferData::synthetic(&tiny_spec(seed), 0.2, seed).unwrap()
}

pub fn randn<T: ntaa_core::tensor::Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng_for(seed, 77);
    Tensor::from_fn(shape, |_| T::c(normal(&mut r)))
}
