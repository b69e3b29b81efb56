//! Named parameter storage and the per-step binding of parameters onto a tape.

use std::collections::HashMap;

use crate::error::{NtaaError, Result};
use crate::rng::NtaaRng;

use super::{Element, Graph, Mode, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Role of a stored tensor; decides decay and whether it is ever trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    BnAffine,
    HeadWeight,
    /// Architecture logits (operation or edge gates).
    Arch,
    /// Non-learned state such as running statistics.
    Buffer,
}

impl ParamKind {
    /// Kinds covered by `||W||²` and by decoupled weight decay.
    pub fn decayable(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::HeadWeight)
    }

    pub fn learnable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::ConvWeight => 0,
            ParamKind::Bias => 1,
            ParamKind::BnAffine => 2,
            ParamKind::HeadWeight => 3,
            ParamKind::Arch => 4,
            ParamKind::Buffer => 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
    frozen: bool,
}

impl<T: Element> Param<T> {
    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn trainable(&self) -> bool {
        self.kind.learnable() && !self.frozen
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        mut tensor: Tensor<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NtaaError::Internal(format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(kind.learnable());
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, kind, tensor, frozen: false });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        let p = &mut self.params[id.0];
        p.frozen = frozen;
        let on = p.trainable();
        p.tensor.set_requires_grad(on);
    }

    /// Freezes (or thaws) every parameter whose name and kind satisfy `pred`.
    pub fn freeze_where(&mut self, frozen: bool, mut pred: impl FnMut(&str, ParamKind) -> bool) {
        for i in 0..self.params.len() {
            if pred(&self.params[i].name, self.params[i].kind) {
                self.set_frozen(ParamId(i), frozen);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Number of learnable scalars (buffers excluded).
    pub fn learnable_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind.learnable()).map(|p| p.tensor.numel()).sum()
    }

    /// Number of scalars an optimizer step may change.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(|p| p.tensor.numel()).sum()
    }

    /// Adds gradients produced by [`Session::backward`]; repeated calls accumulate.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<T>)]) -> Result<()> {
        for (id, g) in grads {
            self.params[id.0].tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Folds recorded statistics into their buffers. Frozen buffers are left untouched.
    pub fn apply_updates(&mut self, updates: &[StatUpdate<T>]) {
        for u in updates {
            let id = match u {
                StatUpdate::Ema { id, .. } | StatUpdate::RunningMean { id, .. } => *id,
            };
            if self.params[id.0].frozen {
                continue;
            }
            match u {
                StatUpdate::Ema { id, keep, values } => {
                    let take = T::one() - *keep;
                    for (r, &v) in self.params[id.0].tensor.data_mut().iter_mut().zip(values) {
                        *r = *keep * *r + take * v;
                    }
                }
                StatUpdate::RunningMean { id, value } => {
                    let d = self.params[id.0].tensor.data_mut();
                    let count = d[1];
                    d[0] = if count == T::zero() {
                        *value
                    } else {
                        d[0] + (*value - d[0]) / (count + T::one())
                    };
                    d[1] = count + T::one();
                }
            }
        }
    }

    /// Bitwise snapshot of selected tensors, for freeze checks.
    pub fn snapshot(&self, mut pred: impl FnMut(&Param<T>) -> bool) -> Vec<(String, Tensor<T>)> {
        self.params.iter().filter(|p| pred(p)).map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }

    /// Names whose contents differ (bitwise) from an earlier snapshot.
    pub fn changed_since(&self, snap: &[(String, Tensor<T>)]) -> Vec<String> {
        snap.iter()
            .filter(|(name, t)| self.by_name(name).is_none_or(|cur| !cur.bitwise_eq(t)))
            .map(|(name, _)| name.clone())
            .collect()
    }
}

/// Deferred change to non-learned state, recorded during a forward pass.
#[derive(Clone, Debug)]
pub enum StatUpdate<T> {
    /// `r <- keep * r + (1 - keep) * value`, elementwise.
    Ema { id: ParamId, keep: T, values: Vec<T> },
    /// Cumulative mean stored as `[mean, count]`.
    RunningMean { id: ParamId, value: T },
}

/// One forward (and optionally backward) pass over parameters held in a store.
pub struct Session<'a, T> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: &'a mut NtaaRng,
    updates: Vec<StatUpdate<T>>,
    /// When set, noise operations record feature statistics for their scale.
    pub estimate_noise: bool,
}

pub struct StepOutput<T> {
    pub loss: f64,
    pub grads: Vec<(ParamId, Vec<T>)>,
    pub updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Element> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, rng: &'a mut NtaaRng) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            rng,
            updates: Vec::new(),
            estimate_noise: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut NtaaRng {
        self.rng
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape handle for a stored parameter, recorded on first use.
    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let mut t = p.tensor.clone();
        t.set_requires_grad(p.trainable());
        let v = self.graph.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn record(&mut self, u: StatUpdate<T>) {
        if self.mode == Mode::Train {
            self.updates.push(u);
        }
    }

    /// Ends the pass without differentiating.
    pub fn finish(self) -> Vec<StatUpdate<T>> {
        self.updates
    }

    pub fn backward(self, loss: Var) -> Result<StepOutput<T>> {
        let mut g = self.graph.backward(loss)?;
        let loss_value = self.graph.value(loss).item().to_f64c();
        let grads = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.param(ParamId(i)).trainable() {
                    return None;
                }
                g.take(v).map(|grad| (ParamId(i), grad))
            })
            .collect();
        Ok(StepOutput { loss: loss_value, grads, updates: self.updates })
    }
}
