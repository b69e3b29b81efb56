use crate::error::{NtaaError, Result};

use super::{Element, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the previous running statistic kept on each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics observed by a train-mode normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (the value folded into the running estimate).
    pub var: Vec<T>,
}

impl<T: Element> BatchStats<T> {
    /// Folds these statistics into running estimates in place.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T]) {
        let keep = T::c(BN_MOMENTUM);
        let take = T::one() - keep;
        for (r, &m) in running_mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + take * m;
        }
        for (r, &v) in running_var.iter_mut().zip(&self.var) {
            *r = keep * *r + take * v;
        }
    }
}

impl<T: Element> Graph<T> {
    /// `relu(gamma * normalize(x) + beta)` with per-channel statistics.
    ///
    /// Train mode normalises with the biased batch variance and returns the
    /// batch statistics for the caller to fold into its running estimates.
    /// Eval mode uses `running_mean` / `running_var`.
    pub fn bn_relu(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(NtaaError::shape(format!("bn_relu expects [N,C,H,W], got {shape:?}")));
        };
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(NtaaError::shape(format!(
                    "bn_relu {what} {:?} for {c} channels",
                    self.shape(v)
                )));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(NtaaError::shape("bn_relu running statistics length"));
        }
        let hw = h * w;
        let m = n * hw;
        if m == 0 {
            return Err(NtaaError::arg("bn_relu over an empty batch"));
        }
        let xd = self.value(x).data();
        let eps = T::c(BN_EPS);
        let (mean, invstd, stats) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for smp in 0..n {
                        s = s + xd[(smp * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                    }
                    let mu = s / T::c(m as f64);
                    let mut q = T::zero();
                    for smp in 0..n {
                        q = q + xd[(smp * c + ch) * hw..][..hw]
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum::<T>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / T::c(m as f64);
                }
                let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let unbiased = if m > 1 {
                    var.iter().map(|&v| v * T::c(m as f64 / (m - 1) as f64)).collect()
                } else {
                    var.clone()
                };
                (mean.clone(), invstd, Some(BatchStats { mean, var: unbiased }))
            }
            Mode::Eval => {
                let invstd = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (running_mean.to_vec(), invstd, None)
            }
        };
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (i, (xv, (hv, ov))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / hw) % c;
            *hv = (*xv - mean[ch]) * invstd[ch];
            *ov = (gd[ch] * *hv + bd[ch]).max(T::zero());
        }
        let train = mode == Mode::Train;
        let var = self.push(
            "bn_relu",
            Tensor::new(&shape, out)?,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let gamma = ctx.inputs[1].data();
                let dz: Vec<T> = ctx
                    .grad
                    .iter()
                    .zip(y)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                let mut sum_dz = vec![T::zero(); c];
                let mut sum_dz_xhat = vec![T::zero(); c];
                for (i, (&d, &xh)) in dz.iter().zip(&xhat).enumerate() {
                    let ch = (i / hw) % c;
                    sum_dz[ch] = sum_dz[ch] + d;
                    sum_dz_xhat[ch] = sum_dz_xhat[ch] + d * xh;
                }
                let gx = ctx.needs[0].then(|| {
                    let inv_m = T::one() / T::c(m as f64);
                    dz.iter()
                        .zip(&xhat)
                        .enumerate()
                        .map(|(i, (&d, &xh))| {
                            let ch = (i / hw) % c;
                            let k = gamma[ch] * invstd[ch];
                            if train {
                                k * (d - sum_dz[ch] * inv_m - xh * sum_dz_xhat[ch] * inv_m)
                            } else {
                                k * d
                            }
                        })
                        .collect()
                });
                vec![
                    gx,
                    ctx.needs[1].then(|| sum_dz_xhat.clone()),
                    ctx.needs[2].then(|| sum_dz.clone()),
                ]
            }),
        )?;
        Ok((var, stats))
    }
}
