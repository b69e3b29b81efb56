mod common;

use std::collections::BTreeSet;

use common::tiny_spec;
use ntaa_core::data::{
    read_tiny_image_bytes, synth_generate, tiny_image_bytes, Batches, Dataset, PatternFamily,
    TINY_RECORD_LEN,
};
use ntaa_core::tensor::Tensor;
use ntaa_core::NtaaError;

#[test]
fn generation_is_deterministic() {
    let spec = tiny_spec(11);
    let (a, b) = (synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
    assert!(a.source_train.images.bitwise_eq(&b.source_train.images));
    assert!(a.target_val.images.bitwise_eq(&b.target_val.images));
    assert_eq!(a.target_train.labels, b.target_train.labels);
    let other = synth_generate(&tiny_spec(12)).unwrap();
    assert!(!a.source_train.images.bitwise_eq(&other.source_train.images));
}

#[test]
fn labels_balanced_and_pixels_clamped() {
    for family in [PatternFamily::OrientedBar, PatternFamily::Blob, PatternFamily::TextureFrequency]
    {
        let mut spec = tiny_spec(3);
        spec.family = family;
        spec.source_train = 50;
        let task = synth_generate(&spec).unwrap();
        for ds in [&task.source_train, &task.source_val, &task.target_train, &task.target_val] {
            let h = ds.class_histogram();
            let (lo, hi) = (h.iter().min().unwrap(), h.iter().max().unwrap());
            assert!(hi - lo <= 1, "{family:?} {}: {h:?}", ds.split);
            assert!(ds.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn target_shift_changes_images() {
    let task = synth_generate(&tiny_spec(4)).unwrap();
    let mut spec = tiny_spec(4);
    spec.target_shift = spec.source_shift;
    let plain = synth_generate(&spec).unwrap();
    assert!(!task.target_train.images.bitwise_eq(&plain.target_train.images));
}

#[test]
fn tiny_image_known_bytes() {
    let mut bytes = vec![0u8; 2 * TINY_RECORD_LEN];
    bytes[0] = 7;
    bytes[1] = 255;
    bytes[2] = 51;
    bytes[TINY_RECORD_LEN] = 2;
    bytes[TINY_RECORD_LEN + 3072] = 128;
    let ds = read_tiny_image_bytes(&bytes).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels, vec![7, 2]);
    assert_eq!(ds.sample_shape(), [3, 32, 32]);
    assert_eq!(ds.image(0)[0], 1.0);
    assert_eq!(ds.image(0)[1], 0.2);
    assert_eq!(ds.image(1)[3071], 128.0 / 255.0);
    assert_eq!(tiny_image_bytes(&ds).unwrap(), bytes);
}

#[test]
fn tiny_image_truncated_and_empty() {
    let bytes = vec![0u8; TINY_RECORD_LEN + 100];
    match read_tiny_image_bytes(&bytes) {
        Err(NtaaError::Format { offset, .. }) => assert_eq!(offset, TINY_RECORD_LEN as u64),
        other => panic!("expected format error, got {other:?}"),
    }
    let mut bad = vec![0u8; 2 * TINY_RECORD_LEN];
    bad[TINY_RECORD_LEN] = 10;
    assert!(
        matches!(read_tiny_image_bytes(&bad), Err(NtaaError::Format { offset, .. }) if offset == TINY_RECORD_LEN as u64)
    );
    assert!(read_tiny_image_bytes(&[]).unwrap().is_empty());
}

#[test]
fn tiny_image_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    let imgs = Tensor::from_fn(&[3, 3, 32, 32], |i| ((i * 37) % 256) as f32 / 255.0);
    let ds = Dataset::new(imgs, vec![0, 9, 4], 10, "t").unwrap();
    ntaa_core::data::write_tiny_image_batches(&path, &ds).unwrap();
    let back = ntaa_core::data::load_tiny_image_batches(&path).unwrap();
    assert!(back.images.bitwise_eq(&ds.images));
    assert_eq!(back.labels, ds.labels);
}

fn epoch_indices(ds: &Dataset, bs: usize, seed: Option<u64>, epoch: u64) -> Vec<Vec<usize>> {
    Batches::new(ds, bs, seed, epoch, false).unwrap().map(|b| b.indices).collect()
}

#[test]
fn batches_partition_the_dataset() {
    let ds = synth_generate(&tiny_spec(5)).unwrap().source_train;
    let whole = epoch_indices(&ds, ds.len(), Some(1), 0);
    assert_eq!(whole.len(), 1);
    assert_eq!(whole[0].len(), ds.len());

    let a = epoch_indices(&ds, 10, Some(3), 2);
    assert_eq!(a, epoch_indices(&ds, 10, Some(3), 2));
    assert_ne!(a, epoch_indices(&ds, 10, Some(3), 3));
    assert_eq!(a.len(), ds.len().div_ceil(10));
    let flat: Vec<usize> = a.concat();
    assert_eq!(flat.len(), ds.len());
    assert_eq!(flat.iter().copied().collect::<BTreeSet<_>>(), (0..ds.len()).collect());
    assert!(matches!(Batches::new(&ds, 0, None, 0, false), Err(NtaaError::Config(_))));
}

#[test]
fn batch_carries_matching_pixels() {
    let ds = synth_generate(&tiny_spec(6)).unwrap().target_train;
    for b in Batches::new(&ds, 7, Some(9), 0, false).unwrap() {
        let n = ds.sample_len();
        for (row, &i) in b.indices.iter().enumerate() {
            assert_eq!(&b.x.data()[row * n..(row + 1) * n], ds.image(i));
            assert_eq!(b.labels[row], ds.labels[i]);
        }
    }
}

#[test]
fn validation_split_is_disjoint_and_seeded() {
    let ds = synth_generate(&tiny_spec(7)).unwrap().target_train;
    let (tr, va) = ds.split_validation(0.25, 3).unwrap();
    assert_eq!(tr.len() + va.len(), ds.len());
    assert_eq!(va.len(), 10);
    let (tr2, _) = ds.split_validation(0.25, 3).unwrap();
    assert!(tr.images.bitwise_eq(&tr2.images));
}
