//! Training objectives: the adaptation loss and the contrastive InfoNCE loss.

use crate::error::{NtaaError, Result};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Session, Tensor, Var};

/// Default weight on `||W||² + op_regularizer`.
pub const DEFAULT_LAMBDA: f64 = 1e-4;
/// Default InfoNCE temperature.
pub const DEFAULT_TAU: f64 = 0.2;
/// Allowed deviation of embedding norms from 1.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskLoss {
    CrossEntropy,
    InfoNce,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub task: TaskLoss,
    pub tau: f64,
    /// Per node, one flag per candidate marking the pretrained op.
    pub alpha0_mask: Vec<Vec<bool>>,
}

impl LossConfig {
    pub fn new(alpha0_mask: Vec<Vec<bool>>) -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            task: TaskLoss::CrossEntropy,
            tau: DEFAULT_TAU,
            alpha0_mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(NtaaError::config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(NtaaError::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if let Some(i) = self.alpha0_mask.iter().position(|m| m.iter().filter(|&&b| b).count() != 1)
        {
            return Err(NtaaError::config(format!(
                "alpha0 mask of node {} must mark exactly one op",
                i + 1
            )));
        }
        Ok(())
    }
}

/// `Σ_{θ∈α₀} θ − Σ_{θ∉α₀} θ` over raw logits, on plain values.
pub fn op_regularizer_value<T: Element>(thetas: &[Tensor<T>], mask: &[Vec<bool>]) -> Result<f64> {
    check_mask(thetas.iter().map(Tensor::numel), mask)?;
    Ok(thetas
        .iter()
        .zip(mask)
        .flat_map(|(t, m)| {
            t.data().iter().zip(m).map(|(&v, &a)| if a { v.to_f64c() } else { -v.to_f64c() })
        })
        .sum())
}

fn check_mask(sizes: impl ExactSizeIterator<Item = usize>, mask: &[Vec<bool>]) -> Result<()> {
    if sizes.len() != mask.len() {
        return Err(NtaaError::shape(format!(
            "{} theta vectors for a mask of {} nodes",
            sizes.len(),
            mask.len()
        )));
    }
    for (i, (n, m)) in sizes.zip(mask).enumerate() {
        if n != m.len() {
            return Err(NtaaError::shape(format!(
                "node {}: {} logits, mask of {}",
                i + 1,
                n,
                m.len()
            )));
        }
    }
    Ok(())
}

/// The operation regularizer on the tape; its gradient is `+1` on masked logits and `-1` elsewhere.
pub fn op_regularizer<T: Element>(
    g: &mut Graph<T>,
    thetas: &[Var],
    mask: &[Vec<bool>],
) -> Result<Var> {
    check_mask(thetas.iter().map(|&v| g.value(v).numel()), mask)?;
    let mut total: Option<Var> = None;
    for (&th, m) in thetas.iter().zip(mask) {
        let coeffs = m.iter().map(|&a| if a { T::one() } else { -T::one() }).collect();
        let term = g.dot_const(th, coeffs)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| NtaaError::arg("op_regularizer over zero nodes"))
}

/// `CE(logits, labels) + λ (||W||² + op_regularizer)`, fully on the tape.
///
/// `weights` are the decayable tensors (conv kernels and head weights).
pub fn ntaa_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    weights: &[Var],
    thetas: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let ce = g.cross_entropy(logits, labels)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let reg = op_regularizer(g, thetas, &cfg.alpha0_mask)?;
    let penalty = if weights.is_empty() {
        reg
    } else {
        let w = g.l2_sq(weights)?;
        g.add(w, reg)?
    };
    let scaled = g.scale(penalty, T::c(cfg.lambda))?;
    g.add(ce, scaled)
}

/// Training form of [`ntaa_loss`]: the `||W||²` part is left to the optimizer's decoupled
/// decay (rate `2λ`, see [`weight_decay_for`]), only `CE + λ·op_regularizer` goes on the tape.
pub fn ntaa_search_loss<T: Element>(
    s: &mut Session<'_, T>,
    logits: Var,
    labels: &[usize],
    theta_ids: &[ParamId],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let ce = s.graph.cross_entropy(logits, labels)?;
    if cfg.lambda == 0.0 || theta_ids.is_empty() {
        return Ok(ce);
    }
    let thetas: Vec<Var> = theta_ids.iter().map(|&id| s.var(id)).collect();
    let reg = op_regularizer(&mut s.graph, &thetas, &cfg.alpha0_mask)?;
    let scaled = s.graph.scale(reg, T::c(cfg.lambda))?;
    s.graph.add(ce, scaled)
}

/// Decoupled decay rate equivalent to the gradient of `λ ||W||²`.
pub fn weight_decay_for(lambda: f64) -> f64 {
    2.0 * lambda
}

/// `||W||²` over the decayable tensors of a store, for reporting.
pub fn weight_norm_sq<T: Element>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter(|(_, p)| p.kind.decayable())
        .flat_map(|(_, p)| p.tensor.data().iter().map(|v| v.to_f64c().powi(2)))
        .sum()
}

fn check_unit_rows<T: Element>(g: &Graph<T>, v: Var, what: &str) -> Result<usize> {
    let t = g.value(v);
    if t.shape().len() != 2 {
        return Err(NtaaError::shape(format!("{what}: expected [N,D], got {:?}", t.shape())));
    }
    let d = t.shape()[1];
    for (r, row) in t.data().chunks(d.max(1)).enumerate() {
        let norm = row.iter().map(|x| x.to_f64c().powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(NtaaError::arg(format!(
                "{what} row {r} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(d)
}

/// Mean over the batch of `-log(exp(q·k⁺/τ) / (exp(q·k⁺/τ) + Σ exp(q·k⁻/τ)))`,
/// with the same `negatives[M,D]` shared by every query.
pub fn infonce<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k_pos: Var,
    negatives: Var,
    tau: f64,
) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(NtaaError::config(format!("tau must be > 0, got {tau}")));
    }
    let d = check_unit_rows(g, q, "query")?;
    if check_unit_rows(g, k_pos, "positive key")? != d
        || check_unit_rows(g, negatives, "negative key")? != d
    {
        return Err(NtaaError::shape("infonce: embedding widths differ"));
    }
    let n = g.shape(q)[0];
    let pos = g.row_dot(q, k_pos)?;
    let logits = if g.shape(negatives)[0] == 0 {
        pos
    } else {
        let neg = g.matmul_nt(q, negatives)?;
        g.concat_cols(pos, neg)?
    };
    let scaled = g.scale(logits, T::c(1.0 / tau))?;
    g.cross_entropy(scaled, &vec![0; n])
}

/// InfoNCE where the negatives of query `i` are every other key in the batch plus an
/// optional queue `[Q,D]` of past keys.
pub fn infonce_in_batch<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    queue: Option<Var>,
    tau: f64,
) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(NtaaError::config(format!("tau must be > 0, got {tau}")));
    }
    let d = check_unit_rows(g, q, "query")?;
    if check_unit_rows(g, k, "key")? != d {
        return Err(NtaaError::shape("infonce: embedding widths differ"));
    }
    let n = g.shape(q)[0];
    if g.shape(k)[0] != n {
        return Err(NtaaError::shape("infonce: query and key batches differ"));
    }
    let mut logits = g.matmul_nt(q, k)?;
    if let Some(queue) = queue {
        if check_unit_rows(g, queue, "queue key")? != d {
            return Err(NtaaError::shape("infonce: queue width differs"));
        }
        if g.shape(queue)[0] > 0 {
            let neg = g.matmul_nt(q, queue)?;
            logits = g.concat_cols(logits, neg)?;
        }
    }
    let scaled = g.scale(logits, T::c(1.0 / tau))?;
    g.cross_entropy(scaled, &(0..n).collect::<Vec<_>>())
}
