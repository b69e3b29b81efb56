//! Fixed trunk (stem, reductions, head) and standalone discrete networks.

use crate::arch::{Backbone, DiscreteArchitecture};
use crate::candidates::{
    add_conv_block, conv_block_forward, ConvParams, OperationInstance, TensorSource, WeightSource,
};
use crate::error::{NtaaError, Result};
use crate::rng::{normal, NtaaRng};
use crate::tensor::{Element, ParamId, ParamKind, ParamStore, Session, Tensor, Var};

/// Parameters of the non-searchable blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub stem: ConvParams,
    /// One block before every stage after the first.
    pub reductions: Vec<ConvParams>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

pub(crate) fn node_prefix(node: usize) -> String {
    format!("node{node}")
}

impl Trunk {
    /// Registers the stem only. Call [`Trunk::add_reduction`] between stages and [`Trunk::finish`] last,
    /// so parameters appear in forward order.
    pub(crate) fn begin<T: Element>(
        store: &mut ParamStore<T>,
        b: &Backbone,
        rng: &mut NtaaRng,
        source: &WeightSource<'_, T>,
    ) -> Result<ConvParams> {
        add_conv_block(store, "stem", b.in_channels, b.widths[0], 3, rng, source)
    }

    pub(crate) fn add_reduction<T: Element>(
        store: &mut ParamStore<T>,
        b: &Backbone,
        stage: usize,
        rng: &mut NtaaRng,
        source: &WeightSource<'_, T>,
    ) -> Result<ConvParams> {
        add_conv_block(
            store,
            &format!("reduce{stage}"),
            b.widths[stage - 1],
            b.widths[stage],
            3,
            rng,
            source,
        )
    }

    pub(crate) fn finish<T: Element>(
        store: &mut ParamStore<T>,
        b: &Backbone,
        stem: ConvParams,
        reductions: Vec<ConvParams>,
        rng: &mut NtaaRng,
        source: &WeightSource<'_, T>,
    ) -> Result<Trunk> {
        let c = *b.widths.last().expect("validated backbone");
        let (w, bias) = match source {
            WeightSource::HeNormal => {
                let std = (1.0 / c as f64).sqrt();
                (
                    Tensor::from_fn(&[b.num_classes, c], |_| T::c(normal(rng) * std)),
                    Tensor::zeros(&[b.num_classes]),
                )
            }
            WeightSource::Pretrained(src) => {
                let fetch = |name: &str, shape: &[usize]| {
                    src.fetch(name).filter(|t| t.shape() == shape).ok_or_else(|| {
                        NtaaError::checkpoint(format!(
                            "pretrained tensor {name} missing or not shaped {shape:?}"
                        ))
                    })
                };
                (fetch("head.weight", &[b.num_classes, c])?, fetch("head.bias", &[b.num_classes])?)
            }
        };
        let head_weight = store.add("head.weight", ParamKind::HeadWeight, w)?;
        let head_bias = store.add("head.bias", ParamKind::Bias, bias)?;
        Ok(Trunk { stem, reductions, head_weight, head_bias })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stem.ids().to_vec();
        for r in &self.reductions {
            ids.extend(r.ids());
        }
        ids.push(self.head_weight);
        ids.push(self.head_bias);
        ids
    }

    /// Learnable scalars in the trunk.
    pub fn param_count<T: Element>(&self, store: &ParamStore<T>) -> usize {
        self.param_ids()
            .into_iter()
            .filter(|&id| store.param(id).kind.learnable())
            .map(|id| store.get(id).numel())
            .sum()
    }

    /// Runs stem, stages and reductions; `node_fn(session, node, preds)` computes node `node`
    /// from its valid predecessors (nearest first). Returns pooled `[N, C]` features.
    pub(crate) fn run<T: Element>(
        &self,
        s: &mut Session<'_, T>,
        b: &Backbone,
        x: Var,
        mut node_fn: impl FnMut(&mut Session<'_, T>, usize, &[Var]) -> Result<Var>,
    ) -> Result<Var> {
        let mut h = conv_block_forward(s, &self.stem, x, 1)?;
        let mut first = 1;
        for (stage, &k) in b.nodes.iter().enumerate() {
            if stage > 0 {
                h = conv_block_forward(s, &self.reductions[stage - 1], h, 2)?;
            }
            // outs[j] is the output at stage-local position j (0 = stage input).
            let mut outs = vec![h];
            for j in 1..=k {
                let preds: Vec<Var> =
                    outs.iter().rev().take(crate::arch::MAX_EDGES).copied().collect();
                let y = node_fn(s, first + j - 1, &preds)?;
                outs.push(y);
            }
            h = *outs.last().expect("stage input present");
            first += k;
        }
        s.graph.global_avg_pool(h)
    }

    pub(crate) fn head<T: Element>(&self, s: &mut Session<'_, T>, features: Var) -> Result<Var> {
        let (w, b) = (s.var(self.head_weight), s.var(self.head_bias));
        s.graph.linear(features, w, b)
    }
}

/// A trainable network with exactly one operation and one incoming edge per node.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub arch: DiscreteArchitecture,
    pub store: ParamStore<T>,
    pub trunk: Trunk,
    pub ops: Vec<OperationInstance>,
}

impl<T: Element> Network<T> {
    /// Builds the network, taking every tensor from `source` (or He-normal init).
    pub fn new(
        arch: &DiscreteArchitecture,
        rng: &mut NtaaRng,
        source: &WeightSource<'_, T>,
    ) -> Result<Self> {
        arch.validate()?;
        let b = &arch.backbone;
        let mut store = ParamStore::new();
        let stem = Trunk::begin(&mut store, b, rng, source)?;
        let mut reductions = Vec::new();
        let mut ops = Vec::with_capacity(arch.nodes.len());
        let mut first = 1;
        for (stage, &k) in b.nodes.iter().enumerate() {
            if stage > 0 {
                reductions.push(Trunk::add_reduction(&mut store, b, stage, rng, source)?);
            }
            for idx in first..first + k {
                let op = arch.nodes[idx - 1].op;
                ops.push(OperationInstance::init(
                    &mut store,
                    &node_prefix(idx),
                    op,
                    b.widths[stage],
                    rng,
                    source,
                )?);
            }
            first += k;
        }
        let trunk = Trunk::finish(&mut store, b, stem, reductions, rng, source)?;
        Ok(Network { arch: arch.clone(), store, trunk, ops })
    }

    /// Loads every tensor by name, reporting all missing or mis-shaped ones at once.
    pub fn from_source(arch: &DiscreteArchitecture, source: &dyn TensorSource<T>) -> Result<Self> {
        let mut scratch = crate::rng::rng_for(0, 0);
        let layout = Network::<T>::new(arch, &mut scratch, &WeightSource::HeNormal)?;
        let bad: Vec<String> = layout
            .store
            .iter()
            .filter(|(_, p)| !p.name.ends_with(".sigma"))
            .filter_map(|(_, p)| match source.fetch(&p.name) {
                Some(t) if t.shape() == p.tensor.shape() => None,
                Some(t) => Some(format!(
                    "{} (shape {:?}, expected {:?})",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )),
                None => Some(format!("{} (missing)", p.name)),
            })
            .collect();
        if !bad.is_empty() {
            return Err(NtaaError::checkpoint(format!("cannot load network: {}", bad.join(", "))));
        }
        Network::new(arch, &mut scratch, &WeightSource::Pretrained(source))
    }

    /// Pooled features before the classifier, `[N, C]`.
    pub fn features(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let arch = &self.arch;
        let ops = &self.ops;
        self.trunk.run(s, &arch.backbone, x, |s, node, preds| {
            let input = preds[arch.edge_slot(node)];
            ops[node - 1].apply(s, input)
        })
    }

    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let f = self.features(s, x)?;
        self.trunk.head(s, f)
    }

    /// Learnable scalar count: selected ops plus trunk.
    pub fn param_count(&self) -> usize {
        self.ops.iter().map(OperationInstance::param_count).sum::<usize>()
            + self.trunk.param_count(&self.store)
    }

    pub fn effective_depth(&self) -> usize {
        self.arch.effective_depth()
    }

    /// Parameter ids of the searchable nodes in `stage` (and the reduction feeding it).
    pub fn stage_param_ids(&self, stage: usize) -> Vec<ParamId> {
        let b = &self.arch.backbone;
        let first: usize = b.nodes[..stage].iter().sum::<usize>() + 1;
        let mut ids: Vec<ParamId> =
            (first..first + b.nodes[stage]).flat_map(|i| self.ops[i - 1].param_ids()).collect();
        if stage == 0 {
            ids.extend(self.trunk.stem.ids());
        } else {
            ids.extend(self.trunk.reductions[stage - 1].ids());
        }
        ids
    }
}
