use std::path::Path;

use super::Dataset;
use crate::error::{NtaaError, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const TINY_RECORD_LEN: usize = 1 + PIXELS;
const CLASSES: usize = 10;

pub fn load_tiny_image_batches(path: impl AsRef<Path>) -> Result<Dataset> {
    read_tiny_image_bytes(&std::fs::read(path)?)
}

pub fn read_tiny_image_bytes(bytes: &[u8]) -> Result<Dataset> {
    let rem = bytes.len() % TINY_RECORD_LEN;
    if rem != 0 {
        let offset = (bytes.len() - rem) as u64;
        return Err(NtaaError::Format {
            offset,
            reason: format!("truncated record: {rem} of {TINY_RECORD_LEN} bytes present"),
        });
    }
    let n = bytes.len() / TINY_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks_exact(TINY_RECORD_LEN).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(NtaaError::Format {
                offset: (i * TINY_RECORD_LEN) as u64,
                reason: format!("label byte {} exceeds 9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(&[n, 3, SIDE, SIDE], data)?, labels, CLASSES, "tiny-image")
}

/// Encodes `[M,3,32,32]` images with labels below 10; pixels are rounded to the nearest byte.
pub fn tiny_image_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.sample_shape() != [3, SIDE, SIDE] {
        return Err(NtaaError::shape(format!(
            "tiny-image records are [3,32,32], got {:?}",
            ds.sample_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * TINY_RECORD_LEN);
    for i in 0..ds.len() {
        let label = ds.labels[i];
        if label >= CLASSES {
            return Err(NtaaError::arg(format!(
                "label {label} cannot be stored in a tiny-image record"
            )));
        }
        out.push(label as u8);
        out.extend(ds.image(i).iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_tiny_image_batches(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    std::fs::write(path, tiny_image_bytes(ds)?)?;
    Ok(())
}
