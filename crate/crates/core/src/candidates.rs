//! The eight per-node candidate operations and their weights.

use std::fmt;
use std::str::FromStr;

use crate::error::{NtaaError, Result};
use crate::rng::{normal, NtaaRng};
use crate::tensor::{
    Element, Mode, ParamId, ParamKind, ParamStore, Session, StatUpdate, Tensor, Var, BN_MOMENTUM,
};

/// Candidate operation. The discriminant order is part of every serialized form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperationKind {
    Conv5,
    Conv3,
    Conv1,
    MaxPool3,
    AvgPool3,
    Globalization,
    Identity,
    NoiseDisturb,
}

pub const NUM_CANDIDATES: usize = 8;

/// Scale factor between the observed feature std and the injected noise std.
pub const NOISE_STD_FRACTION: f64 = 0.1;
/// Noise std used until a feature-statistics estimate exists.
pub const NOISE_SIGMA_FALLBACK: f64 = 0.1;

impl OperationKind {
    pub const ALL: [OperationKind; NUM_CANDIDATES] = [
        OperationKind::Conv5,
        OperationKind::Conv3,
        OperationKind::Conv1,
        OperationKind::MaxPool3,
        OperationKind::AvgPool3,
        OperationKind::Globalization,
        OperationKind::Identity,
        OperationKind::NoiseDisturb,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::Conv5 => "conv5",
            OperationKind::Conv3 => "conv3",
            OperationKind::Conv1 => "conv1",
            OperationKind::MaxPool3 => "max_pool3",
            OperationKind::AvgPool3 => "avg_pool3",
            OperationKind::Globalization => "globalization",
            OperationKind::Identity => "identity",
            OperationKind::NoiseDisturb => "noise",
        }
    }

    pub fn kernel_size(self) -> Option<usize> {
        match self {
            OperationKind::Conv5 => Some(5),
            OperationKind::Conv3 => Some(3),
            OperationKind::Conv1 => Some(1),
            _ => None,
        }
    }

    pub fn has_weights(self) -> bool {
        self.kernel_size().is_some()
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = NtaaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NtaaError::arg(format!("unknown operation `{s}`")))
    }
}

/// Source of named tensors for weight initialization.
pub trait TensorSource<T> {
    fn fetch(&self, name: &str) -> Option<Tensor<T>>;
}

impl<T: Element> TensorSource<T> for ParamStore<T> {
    fn fetch(&self, name: &str) -> Option<Tensor<T>> {
        self.by_name(name).cloned()
    }
}

/// Where an operation's weights come from.
pub enum WeightSource<'a, T> {
    HeNormal,
    Pretrained(&'a dyn TensorSource<T>),
}

/// Parameters of a conv candidate: kernel, bias and the following BN affine + statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl ConvParams {
    pub fn ids(&self) -> [ParamId; 6] {
        [self.kernel, self.bias, self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Names of the tensors a conv block owns under `prefix`, in [`ConvParams::ids`] order.
pub fn conv_param_names(prefix: &str) -> [String; 6] {
    [
        format!("{prefix}.kernel"),
        format!("{prefix}.bias"),
        format!("{prefix}.bn.gamma"),
        format!("{prefix}.bn.beta"),
        format!("{prefix}.bn.running_mean"),
        format!("{prefix}.bn.running_var"),
    ]
}

/// Adds a `[cout, cin, s, s]` conv + BN block to `store`.
pub fn add_conv_block<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    size: usize,
    rng: &mut NtaaRng,
    source: &WeightSource<'_, T>,
) -> Result<ConvParams> {
    let names = conv_param_names(prefix);
    let shapes: [Vec<usize>; 6] =
        [vec![cout, cin, size, size], vec![cout], vec![cout], vec![cout], vec![cout], vec![cout]];
    let kinds = [
        ParamKind::ConvWeight,
        ParamKind::Bias,
        ParamKind::BnAffine,
        ParamKind::BnAffine,
        ParamKind::Buffer,
        ParamKind::Buffer,
    ];
    let tensors: Vec<Tensor<T>> = match source {
        WeightSource::HeNormal => {
            let std = (2.0 / (cin * size * size) as f64).sqrt();
            vec![
                Tensor::from_fn(&shapes[0], |_| T::c(normal(rng) * std)),
                Tensor::zeros(&shapes[1]),
                Tensor::ones(&shapes[2]),
                Tensor::zeros(&shapes[3]),
                Tensor::zeros(&shapes[4]),
                Tensor::ones(&shapes[5]),
            ]
        }
        WeightSource::Pretrained(src) => {
            let mut bad = Vec::new();
            let mut out = Vec::with_capacity(6);
            for (name, shape) in names.iter().zip(&shapes) {
                match src.fetch(name) {
                    Some(t) if t.shape() == shape.as_slice() => out.push(t),
                    Some(t) => {
                        bad.push(format!("{name} (shape {:?}, expected {shape:?})", t.shape()))
                    }
                    None => bad.push(format!("{name} (missing)")),
                }
            }
            if !bad.is_empty() {
                return Err(NtaaError::checkpoint(format!(
                    "pretrained tensors unusable: {}",
                    bad.join(", ")
                )));
            }
            out
        }
    };
    let mut ids = Vec::with_capacity(6);
    for ((name, kind), t) in names.into_iter().zip(kinds).zip(tensors) {
        ids.push(store.add(name, kind, t)?);
    }
    Ok(ConvParams {
        kernel: ids[0],
        bias: ids[1],
        gamma: ids[2],
        beta: ids[3],
        running_mean: ids[4],
        running_var: ids[5],
    })
}

/// `conv -> BN -> ReLU` over the block's parameters, recording running-stat updates in train mode.
pub fn conv_block_forward<T: Element>(
    s: &mut Session<'_, T>,
    p: &ConvParams,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let (k, b, gm, bt) = (s.var(p.kernel), s.var(p.bias), s.var(p.gamma), s.var(p.beta));
    let y = s.graph.conv2d_strided(x, k, Some(b), stride)?;
    let (rm, rv) = (
        s.store().get(p.running_mean).data().to_vec(),
        s.store().get(p.running_var).data().to_vec(),
    );
    let mode = s.mode();
    let (out, stats) = s.graph.bn_relu(y, gm, bt, &rm, &rv, mode)?;
    if let Some(st) = stats {
        let keep = T::c(BN_MOMENTUM);
        s.record(StatUpdate::Ema { id: p.running_mean, keep, values: st.mean });
        s.record(StatUpdate::Ema { id: p.running_var, keep, values: st.var });
    }
    Ok(out)
}

/// One candidate operation at a searchable position. Input and output channels are equal.
#[derive(Clone, Debug, PartialEq)]
pub struct OperationInstance {
    pub kind: OperationKind,
    pub channels: usize,
    /// Present iff the kind is a convolution.
    pub weights: Option<ConvParams>,
    /// `[sigma, observations]` buffer; present iff the kind is `NoiseDisturb`.
    pub sigma: Option<ParamId>,
}

impl OperationInstance {
    /// Creates the operation and registers its tensors under `prefix.<kind>`.
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: OperationKind,
        channels: usize,
        rng: &mut NtaaRng,
        source: &WeightSource<'_, T>,
    ) -> Result<Self> {
        let name = format!("{prefix}.{}", kind.name());
        let weights = match kind.kernel_size() {
            Some(size) => {
                Some(add_conv_block(store, &name, channels, channels, size, rng, source)?)
            }
            None => None,
        };
        let sigma = if kind == OperationKind::NoiseDisturb {
            let t = match source {
                WeightSource::Pretrained(src) => src.fetch(&format!("{name}.sigma")),
                WeightSource::HeNormal => None,
            };
            let t = t.filter(|t| t.shape() == [2]).unwrap_or_else(|| {
                Tensor::new(&[2], vec![T::c(NOISE_SIGMA_FALLBACK), T::zero()]).expect("2 elements")
            });
            Some(store.add(format!("{name}.sigma"), ParamKind::Buffer, t)?)
        } else {
            None
        };
        Ok(OperationInstance { kind, channels, weights, sigma })
    }

    /// Learnable scalars owned by this operation, BN affine included.
    pub fn param_count(&self) -> usize {
        match self.kind.kernel_size() {
            Some(s) => self.channels * self.channels * s * s + self.channels + 2 * self.channels,
            None => 0,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.weights.map(|w| w.ids().to_vec()).unwrap_or_default();
        ids.extend(self.sigma);
        ids
    }

    pub fn noise_sigma<T: Element>(&self, store: &ParamStore<T>) -> Option<T> {
        self.sigma.map(|id| store.get(id).data()[0])
    }

    /// Applies the operation. Output shape equals input shape.
    pub fn apply<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(NtaaError::shape(format!(
                "{} expects [N,{},H,W], got {shape:?}",
                self.kind, self.channels
            )));
        }
        match self.kind {
            OperationKind::Conv5 | OperationKind::Conv3 | OperationKind::Conv1 => {
                let w = self
                    .weights
                    .as_ref()
                    .ok_or_else(|| NtaaError::Internal(format!("{} without weights", self.kind)))?;
                conv_block_forward(s, w, x, 1)
            }
            OperationKind::MaxPool3 => s.graph.max_pool3(x),
            OperationKind::AvgPool3 => s.graph.avg_pool3(x),
            OperationKind::Globalization => s.graph.global_avg_broadcast(x),
            OperationKind::Identity => Ok(x),
            OperationKind::NoiseDisturb => {
                if s.mode() == Mode::Eval {
                    return Ok(x);
                }
                let id = self
                    .sigma
                    .ok_or_else(|| NtaaError::Internal("noise op without sigma".into()))?;
                if s.estimate_noise {
                    let d = s.graph.value(x).data();
                    let n = T::c(d.len() as f64);
                    let mean = d.iter().copied().sum::<T>() / n;
                    let var = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    s.record(StatUpdate::RunningMean {
                        id,
                        value: var.sqrt() * T::c(NOISE_STD_FRACTION),
                    });
                }
                let sigma = s.store().get(id).data()[0].to_f64c();
                let rng = s.rng();
                let eps = Tensor::from_fn(&shape, |_| T::c(normal(rng) * sigma));
                let e = s.input(eps);
                s.graph.add(x, e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn index_order_is_fixed() {
        for (i, k) in OperationKind::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(OperationKind::from_index(i), Some(*k));
            assert_eq!(k.name().parse::<OperationKind>().unwrap(), *k);
        }
        assert!(OperationKind::from_index(8).is_none());
    }

    #[test]
    fn param_counts() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(0, 0);
        let mk = |store: &mut ParamStore<f64>, rng: &mut NtaaRng, k: OperationKind| {
            OperationInstance::init(store, "n", k, 4, rng, &WeightSource::HeNormal).unwrap()
        };
        assert_eq!(mk(&mut store, &mut rng, OperationKind::Identity).param_count(), 0);
        assert_eq!(mk(&mut store, &mut rng, OperationKind::Conv1).param_count(), 28);
        assert_eq!(mk(&mut store, &mut rng, OperationKind::Conv3).param_count(), 156);
        assert_eq!(mk(&mut store, &mut rng, OperationKind::Conv5).param_count(), 4 * 4 * 25 + 12);
        for k in &OperationKind::ALL[3..] {
            let op = mk(&mut store, &mut rng, *k);
            assert_eq!(op.param_count(), 0);
            assert!(op.weights.is_none());
            assert_eq!(op.sigma.is_some(), *k == OperationKind::NoiseDisturb);
        }
    }
}
