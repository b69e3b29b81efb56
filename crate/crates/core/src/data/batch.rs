use rand::seq::SliceRandom;
use rand::Rng;

use super::Dataset;
use crate::error::{NtaaError, Result};
use crate::rng::{rng_for_salted, streams, NtaaRng};
use crate::tensor::{Element, Tensor};

const PAD: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Dataset positions of the samples, in batch order.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn x_as<T: Element>(&self) -> Tensor<T> {
        self.x.cast()
    }
}

/// One epoch of mini-batches. The order depends only on `(shuffle_seed, epoch)`.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    augment: Option<NtaaRng>,
}

impl<'a> Batches<'a> {
    /// `shuffle_seed = None` keeps dataset order. Augmentation (pad-4 crop + flip) only when `augment`.
    pub fn new(
        ds: &'a Dataset,
        batch_size: usize,
        shuffle_seed: Option<u64>,
        epoch: u64,
        augment: bool,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(NtaaError::config("batch size must be >= 1"));
        }
        let mut order: Vec<usize> = (0..ds.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut rng_for_salted(seed, epoch, streams::SHUFFLE));
        }
        let augment =
            augment.then(|| rng_for_salted(shuffle_seed.unwrap_or(0), epoch, streams::AUGMENT));
        Ok(Batches { ds, order, batch_size, pos: 0, augment })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let [c, h, w] = self.ds.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in &indices {
            match self.augment.as_mut() {
                Some(rng) => data.extend(augment_pad_crop_flip(self.ds.image(i), c, h, w, rng)),
                None => data.extend_from_slice(self.ds.image(i)),
            }
        }
        Some(Batch {
            x: Tensor::new(&[indices.len(), c, h, w], data).expect("sized above"),
            labels: indices.iter().map(|&i| self.ds.labels[i]).collect(),
            indices,
        })
    }
}

/// Zero-pads by 4, takes a random `h x w` crop and flips horizontally with probability 0.5.
pub fn augment_pad_crop_flip(
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    rng: &mut NtaaRng,
) -> Vec<f32> {
    let oy = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
    let ox = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
    let flip = rng.random_bool(0.5);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + oy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let tx = if flip { w - 1 - x } else { x };
                let sx = tx as isize + ox;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}
