use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;

use super::Dataset;
use crate::error::{NtaaError, Result};
use crate::rng::{normal, rng_for, streams, NtaaRng};
use crate::tensor::Tensor;

/// What distinguishes one class from another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternFamily {
    /// Bars whose orientation encodes the class.
    OrientedBar,
    /// A soft blob whose radius encodes the class.
    Blob,
    /// A grating whose spatial frequency encodes the class.
    TextureFrequency,
}

impl PatternFamily {
    pub fn name(self) -> &'static str {
        match self {
            PatternFamily::OrientedBar => "oriented-bar",
            PatternFamily::Blob => "blob",
            PatternFamily::TextureFrequency => "texture-frequency",
        }
    }
}

impl std::str::FromStr for PatternFamily {
    type Err = NtaaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oriented-bar" => Ok(PatternFamily::OrientedBar),
            "blob" => Ok(PatternFamily::Blob),
            "texture-frequency" => Ok(PatternFamily::TextureFrequency),
            _ => Err(NtaaError::config(format!("unknown pattern family `{s}`"))),
        }
    }
}

/// Image-level corruptions applied after rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainShift {
    /// Std of a Gaussian blur in pixels; 0 disables it.
    pub blur_std: f64,
    /// Std of additive per-pixel Gaussian noise.
    pub noise_std: f64,
    /// Geometric zoom of the pattern about the image centre.
    pub scale: f64,
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift { blur_std: 0.0, noise_std: 0.0, scale: 1.0 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub family: PatternFamily,
    /// Probability that a stored label is replaced by a different random class.
    pub label_noise: f64,
    pub source_shift: DomainShift,
    pub target_shift: DomainShift,
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            image_size: 16,
            channels: 3,
            num_classes: 4,
            family: PatternFamily::OrientedBar,
            label_noise: 0.0,
            source_shift: DomainShift::NONE,
            target_shift: DomainShift { blur_std: 1.5, noise_std: 0.05, scale: 1.0 },
            source_train: 4000,
            source_val: 1000,
            target_train: 1000,
            target_val: 500,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(NtaaError::config("synthetic task needs at least two classes"));
        }
        if self.image_size < 4 || self.channels == 0 {
            return Err(NtaaError::config(
                "synthetic images must be at least 4x4 with one channel",
            ));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(NtaaError::config(format!(
                "label noise must be in [0,1], got {}",
                self.label_noise
            )));
        }
        for s in [self.source_shift, self.target_shift] {
            if s.blur_std < 0.0 || s.noise_std < 0.0 || s.scale.is_nan() || s.scale <= 0.0 {
                return Err(NtaaError::config("domain shift needs blur, noise >= 0 and scale > 0"));
            }
        }
        Ok(())
    }
}

/// Source and target splits sharing one label space.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
}

/// Generates the four splits; a pure function of `spec` (its seed included).
pub fn synth_generate(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut src = rng_for(spec.seed, streams::DATA_SOURCE);
    let mut tgt = rng_for(spec.seed, streams::DATA_TARGET);
    Ok(SyntheticTask {
        source_train: generate_split(
            spec,
            spec.source_shift,
            spec.source_train,
            "source-train",
            &mut src,
        )?,
        source_val: generate_split(
            spec,
            spec.source_shift,
            spec.source_val,
            "source-val",
            &mut src,
        )?,
        target_train: generate_split(
            spec,
            spec.target_shift,
            spec.target_train,
            "target-train",
            &mut tgt,
        )?,
        target_val: generate_split(
            spec,
            spec.target_shift,
            spec.target_val,
            "target-val",
            &mut tgt,
        )?,
    })
}

fn generate_split(
    spec: &SyntheticTaskSpec,
    shift: DomainShift,
    n: usize,
    split: &str,
    rng: &mut NtaaRng,
) -> Result<Dataset> {
    let c = spec.num_classes;
    let mut classes: Vec<usize> = (0..n).map(|i| i % c).collect();
    classes.shuffle(rng);
    let (ch, sz) = (spec.channels, spec.image_size);
    let mut data = Vec::with_capacity(n * ch * sz * sz);
    let mut labels = Vec::with_capacity(n);
    for &class in &classes {
        data.extend(render(spec, shift, class, rng));
        let label = if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
            (class + rng.random_range(1..c)) % c
        } else {
            class
        };
        labels.push(label);
    }
    Dataset::new(Tensor::new(&[n, ch, sz, sz], data)?, labels, c, split)
}

fn render(
    spec: &SyntheticTaskSpec,
    shift: DomainShift,
    class: usize,
    rng: &mut NtaaRng,
) -> Vec<f32> {
    let sz = spec.image_size;
    let s = sz as f64;
    let frac = class as f64 / spec.num_classes as f64;
    let pattern: Vec<f64> = match spec.family {
        PatternFamily::OrientedBar => {
            let angle = PI * (frac + rng.random_range(-0.15..0.15) / spec.num_classes as f64);
            let (dx, dy) = (angle.cos(), angle.sin());
            let bars: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=2))
                .map(|_| {
                    (
                        s * rng.random_range(0.3..0.7),
                        s * rng.random_range(0.3..0.7),
                        s * rng.random_range(0.25..0.45),
                        rng.random_range(0.7..1.2),
                    )
                })
                .collect();
            field(sz, shift.scale, |x, y| {
                bars.iter()
                    .map(|&(cx, cy, half, w)| {
                        let (px, py) = (x - cx, y - cy);
                        let along = (px * dx + py * dy).clamp(-half, half);
                        let d2 = (px - along * dx).powi(2) + (py - along * dy).powi(2);
                        (-d2 / (2.0 * w * w)).exp()
                    })
                    .fold(0.0, f64::max)
            })
        }
        PatternFamily::Blob => {
            let span = class as f64 / (spec.num_classes - 1) as f64;
            let r = s * (0.08 + 0.22 * span) * rng.random_range(0.95..1.05);
            let (cx, cy) = (s * rng.random_range(0.35..0.65), s * rng.random_range(0.35..0.65));
            field(sz, shift.scale, |x, y| {
                (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp()
            })
        }
        PatternFamily::TextureFrequency => {
            let span = class as f64 / (spec.num_classes - 1) as f64;
            let f = (0.08 + 0.30 * span) * rng.random_range(0.97..1.03);
            let phi = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (dx, dy) = (phi.cos(), phi.sin());
            field(sz, shift.scale, |x, y| {
                0.5 + 0.5 * (2.0 * PI * f * (x * dx + y * dy) + phase).sin()
            })
        }
    };
    let base = rng.random_range(0.05..0.25);
    let tint: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.5..1.0)).collect();
    let mut img: Vec<f64> = Vec::with_capacity(spec.channels * sz * sz);
    for &t in &tint {
        img.extend(pattern.iter().map(|&p| base + (0.9 - base) * t * p + 0.02 * normal(rng)));
    }
    if shift.blur_std > 0.0 {
        for plane in img.chunks_mut(sz * sz) {
            gaussian_blur(plane, sz, shift.blur_std);
        }
    }
    if shift.noise_std > 0.0 {
        for v in img.iter_mut() {
            *v += shift.noise_std * normal(rng);
        }
    }
    img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()
}

/// Samples `f` on pixel centres after zooming by `scale` about the image centre.
fn field(sz: usize, scale: f64, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let c = sz as f64 / 2.0;
    let mut out = Vec::with_capacity(sz * sz);
    for yi in 0..sz {
        for xi in 0..sz {
            let x = c + (xi as f64 + 0.5 - c) / scale;
            let y = c + (yi as f64 + 0.5 - c) / scale;
            out.push(f(x, y));
        }
    }
    out
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(plane: &mut [f64], sz: usize, std: f64) {
    let r = (3.0 * std).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * std * std)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let clamp = |i: isize| i.clamp(0, sz as isize - 1) as usize;
    let mut tmp = vec![0.0; sz * sz];
    for y in 0..sz {
        for x in 0..sz {
            tmp[y * sz + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * plane[y * sz + clamp(x as isize + d)])
                .sum::<f64>()
                / norm;
        }
    }
    for y in 0..sz {
        for x in 0..sz {
            plane[y * sz + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d) * sz + x])
                .sum::<f64>()
                / norm;
        }
    }
}
