//! Datasets: a procedural transfer-task generator, the tiny-image binary format and batching.

mod batch;
mod synth;
mod tiny_image;

pub use batch::{augment_pad_crop_flip, Batch, Batches};
pub use synth::{synth_generate, DomainShift, PatternFamily, SyntheticTask, SyntheticTaskSpec};
pub use tiny_image::{
    load_tiny_image_batches, read_tiny_image_bytes, tiny_image_bytes, write_tiny_image_batches,
    TINY_RECORD_LEN,
};

use crate::error::{NtaaError, Result};
use crate::rng::{rng_for, streams};
use crate::tensor::Tensor;

/// Images `[M, C, H, W]` with pixels in `[0, 1]` and their integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(NtaaError::shape(format!("dataset images must be [M,C,H,W], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(NtaaError::shape(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(NtaaError::arg(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset { images, labels, num_classes, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// New dataset holding `indices` in the given order.
    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> Self {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.sample_shape();
        Dataset {
            images: Tensor::new(&[indices.len(), c, h, w], data).expect("sized above"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: split.into(),
        }
    }

    /// Seeded split into `(train, validation)` with `round(fraction * len)` validation samples.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(NtaaError::config(format!(
                "validation fraction must be in [0,1), got {fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng_for(seed, streams::SPLIT));
        let n_val = (fraction * self.len() as f64).round() as usize;
        let (val, train) = idx.split_at(n_val);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train, "train"), self.subset(&val, "val")))
    }

    /// Count of samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
