//! The searchable network: every node mixes all candidate operations under
//! softmax gates `theta`, over a softmax-gated choice of incoming edge `beta`.

use crate::arch::{Backbone, DiscreteArchitecture, NodeChoice};
use crate::candidates::{OperationInstance, OperationKind, TensorSource, WeightSource};
use crate::error::{NtaaError, Result};
use crate::network::{node_prefix, Network, Trunk};
use crate::rng::{rng_for, NtaaRng};
use crate::tensor::{softmax_row, Element, ParamId, ParamKind, ParamStore, Session, Tensor, Var};

/// `P(op t) = exp(theta_t) / Σ_s exp(theta_s)`.
pub fn selection_probs<T: Element>(theta: &Tensor<T>) -> Tensor<T> {
    Tensor::new(theta.shape(), softmax_row(theta.data())).expect("same shape")
}

/// Initial gate values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateInit {
    /// `theta = 1` on the pretrained op, `0` elsewhere; `beta` favours the immediate predecessor.
    FavourAlpha0,
    /// `theta = 1` everywhere, `beta = 0` everywhere.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedNode {
    /// Global 1-based node index.
    pub index: usize,
    pub candidates: Vec<OperationInstance>,
    pub theta: ParamId,
    /// Logits over predecessors, nearest first.
    pub beta: ParamId,
    /// Position of the pretrained op within `candidates`.
    pub alpha0_index: usize,
}

impl MixedNode {
    pub fn kinds(&self) -> Vec<OperationKind> {
        self.candidates.iter().map(|c| c.kind).collect()
    }

    /// Argmax of `theta`; ties prefer the pretrained op, then the lowest index.
    pub fn chosen_op<T: Element>(&self, store: &ParamStore<T>) -> usize {
        let th = store.get(self.theta).data();
        let mut best = self.alpha0_index;
        for (i, &v) in th.iter().enumerate() {
            if v > th[best] || (v == th[best] && best != self.alpha0_index && i < best) {
                best = i;
            }
        }
        best
    }

    /// Argmax of `beta`; ties prefer the nearest predecessor.
    pub fn chosen_edge_slot<T: Element>(&self, store: &ParamStore<T>) -> usize {
        let b = store.get(self.beta).data();
        let mut best = 0;
        for (i, &v) in b.iter().enumerate() {
            if v > b[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug)]
pub struct SuperNet<T> {
    pub alpha0: DiscreteArchitecture,
    /// Candidate kinds offered at every node, in canonical order.
    pub candidate_set: Vec<OperationKind>,
    pub store: ParamStore<T>,
    pub trunk: Trunk,
    pub nodes: Vec<MixedNode>,
    pub seed: u64,
}

impl<T: Element> SuperNet<T> {
    /// Builds the supernet around `alpha0`: its ops (and the trunk) come from `pretrained`,
    /// all other candidates are He-normal initialized, gates follow [`GateInit::FavourAlpha0`].
    pub fn init_from_pretrained(
        alpha0: &DiscreteArchitecture,
        pretrained: &dyn TensorSource<T>,
        candidate_set: &[OperationKind],
        seed: u64,
    ) -> Result<Self> {
        // Validate the whole checkpoint up front so every offending name is reported.
        Network::from_source(alpha0, pretrained)?;
        Self::build(alpha0, Some(pretrained), false, candidate_set, seed)
    }

    /// Restores a saved supernet: every candidate, gate and trunk tensor comes from `source`.
    pub fn from_source(
        alpha0: &DiscreteArchitecture,
        source: &dyn TensorSource<T>,
        candidate_set: &[OperationKind],
        seed: u64,
    ) -> Result<Self> {
        let mut net = Self::build(alpha0, Some(source), true, candidate_set, seed)?;
        let mut missing = Vec::new();
        for id in net.theta_ids().into_iter().chain(net.beta_ids()) {
            let name = net.store.param(id).name.clone();
            match source.fetch(&name) {
                Some(t) if t.shape() == net.store.get(id).shape() => *net.store.get_mut(id) = t,
                _ => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(NtaaError::checkpoint(format!(
                "gate tensors missing or mis-shaped: {}",
                missing.join(", ")
            )));
        }
        Ok(net)
    }

    /// Supernet with every weight freshly initialized (no pretrained source).
    pub fn init_random(
        alpha0: &DiscreteArchitecture,
        candidate_set: &[OperationKind],
        seed: u64,
    ) -> Result<Self> {
        Self::build(alpha0, None, false, candidate_set, seed)
    }

    fn build(
        alpha0: &DiscreteArchitecture,
        pretrained: Option<&dyn TensorSource<T>>,
        every_candidate: bool,
        candidate_set: &[OperationKind],
        seed: u64,
    ) -> Result<Self> {
        alpha0.validate()?;
        let mut set = candidate_set.to_vec();
        set.sort();
        set.dedup();
        if set.is_empty() {
            return Err(NtaaError::config("empty candidate set"));
        }
        for (i, n) in alpha0.nodes.iter().enumerate() {
            if !set.contains(&n.op) {
                return Err(NtaaError::config(format!(
                    "pretrained op {} at node {} is not a candidate",
                    n.op,
                    i + 1
                )));
            }
        }
        let b = &alpha0.backbone;
        let mut rng = rng_for(seed, crate::rng::streams::INIT);
        let mut store = ParamStore::new();
        let trunk_src = match pretrained {
            Some(p) => WeightSource::Pretrained(p),
            None => WeightSource::HeNormal,
        };
        let stem = Trunk::begin(&mut store, b, &mut rng, &trunk_src)?;
        let mut reductions = Vec::new();
        let mut nodes = Vec::with_capacity(b.num_nodes());
        let mut first = 1;
        for (stage, &k) in b.nodes.iter().enumerate() {
            if stage > 0 {
                reductions.push(Trunk::add_reduction(&mut store, b, stage, &mut rng, &trunk_src)?);
            }
            for idx in first..first + k {
                let a0 = alpha0.nodes[idx - 1].op;
                let prefix = node_prefix(idx);
                let mut candidates = Vec::with_capacity(set.len());
                for &kind in &set {
                    let src = match pretrained {
                        Some(p) if kind == a0 || every_candidate => WeightSource::Pretrained(p),
                        _ => WeightSource::HeNormal,
                    };
                    candidates.push(OperationInstance::init(
                        &mut store,
                        &prefix,
                        kind,
                        b.widths[stage],
                        &mut rng,
                        &src,
                    )?);
                }
                let alpha0_index = set.iter().position(|&k| k == a0).expect("checked above");
                let edges = b.predecessors(idx).len();
                let theta = store.add(
                    format!("{prefix}.theta"),
                    ParamKind::Arch,
                    Tensor::zeros(&[set.len()]),
                )?;
                let beta = store.add(
                    format!("{prefix}.beta"),
                    ParamKind::Arch,
                    Tensor::zeros(&[edges]),
                )?;
                nodes.push(MixedNode { index: idx, candidates, theta, beta, alpha0_index });
            }
            first += k;
        }
        let trunk = Trunk::finish(&mut store, b, stem, reductions, &mut rng, &trunk_src)?;
        let mut net =
            SuperNet { alpha0: alpha0.clone(), candidate_set: set, store, trunk, nodes, seed };
        net.reset_gates(GateInit::FavourAlpha0);
        Ok(net)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.alpha0.backbone
    }

    pub fn reset_gates(&mut self, init: GateInit) {
        for n in &self.nodes {
            let th = self.store.get_mut(n.theta).data_mut();
            for (i, v) in th.iter_mut().enumerate() {
                *v = match init {
                    GateInit::FavourAlpha0 if i == n.alpha0_index => T::one(),
                    GateInit::FavourAlpha0 => T::zero(),
                    GateInit::Uniform => T::one(),
                };
            }
            let be = self.store.get_mut(n.beta).data_mut();
            for (i, v) in be.iter_mut().enumerate() {
                *v = if init == GateInit::FavourAlpha0 && i == 0 { T::one() } else { T::zero() };
            }
        }
    }

    pub fn theta_ids(&self) -> Vec<ParamId> {
        self.nodes.iter().map(|n| n.theta).collect()
    }

    pub fn beta_ids(&self) -> Vec<ParamId> {
        self.nodes.iter().map(|n| n.beta).collect()
    }

    pub fn thetas(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().map(|n| self.store.get(n.theta).to_f64_vec()).collect()
    }

    /// Per node, which candidate entries belong to the pretrained architecture.
    pub fn alpha0_mask(&self) -> Vec<Vec<bool>> {
        self.nodes
            .iter()
            .map(|n| (0..n.candidates.len()).map(|i| i == n.alpha0_index).collect())
            .collect()
    }

    /// Ids of every op weight (not trunk, not gates).
    pub fn candidate_param_ids(&self) -> Vec<ParamId> {
        self.nodes
            .iter()
            .flat_map(|n| n.candidates.iter().flat_map(OperationInstance::param_ids))
            .collect()
    }

    /// Expectation over candidates applied to the gated node input.
    pub fn mixed_forward(
        &self,
        s: &mut Session<'_, T>,
        node: &MixedNode,
        preds: &[Var],
    ) -> Result<Var> {
        let input = if preds.len() == 1 {
            preds[0]
        } else {
            let bv = s.var(node.beta);
            if s.graph.value(bv).numel() != preds.len() {
                return Err(NtaaError::shape(format!(
                    "node {}: {} edge gates for {} predecessors",
                    node.index,
                    s.graph.value(bv).numel(),
                    preds.len()
                )));
            }
            let w = s.graph.softmax(bv)?;
            s.graph.mix(preds, w)?
        };
        let outs = node.candidates.iter().map(|c| c.apply(s, input)).collect::<Result<Vec<_>>>()?;
        let tv = s.var(node.theta);
        let p = s.graph.softmax(tv)?;
        s.graph.mix(&outs, p)
    }

    pub fn features(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        self.trunk.run(s, self.backbone(), x, |s, idx, preds| {
            self.mixed_forward(s, &self.nodes[idx - 1], preds)
        })
    }

    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let f = self.features(s, x)?;
        self.trunk.head(s, f)
    }

    fn check_arch(&self, arch: &DiscreteArchitecture) -> Result<()> {
        arch.validate()?;
        if arch.backbone != *self.backbone() {
            return Err(NtaaError::arg("architecture backbone differs from the supernet's"));
        }
        if let Some((i, n)) =
            arch.nodes.iter().enumerate().find(|(_, n)| !self.candidate_set.contains(&n.op))
        {
            return Err(NtaaError::arg(format!(
                "node {}: {} is not in the candidate set",
                i + 1,
                n.op
            )));
        }
        Ok(())
    }

    fn candidate(&self, node: usize, op: OperationKind) -> &OperationInstance {
        let n = &self.nodes[node - 1];
        n.candidates.iter().find(|c| c.kind == op).expect("checked candidate")
    }

    /// Pooled features of the hard-selected subnet, sharing this supernet's weights.
    pub fn one_hot_features(
        &self,
        s: &mut Session<'_, T>,
        arch: &DiscreteArchitecture,
        x: Var,
    ) -> Result<Var> {
        self.check_arch(arch)?;
        self.trunk.run(s, self.backbone(), x, |s, idx, preds| {
            let input = preds[arch.edge_slot(idx)];
            self.candidate(idx, arch.nodes[idx - 1].op).apply(s, input)
        })
    }

    /// Logits of the hard-selected subnet (no mixture).
    pub fn one_hot_forward(
        &self,
        s: &mut Session<'_, T>,
        arch: &DiscreteArchitecture,
        x: Var,
    ) -> Result<Var> {
        let f = self.one_hot_features(s, arch, x)?;
        self.trunk.head(s, f)
    }

    /// Per node: argmax op and argmax edge.
    pub fn discretize(&self) -> DiscreteArchitecture {
        let b = self.backbone();
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let preds = b.predecessors(n.index);
                NodeChoice {
                    op: n.candidates[n.chosen_op(&self.store)].kind,
                    edge: preds[n.chosen_edge_slot(&self.store)],
                }
            })
            .collect();
        DiscreteArchitecture { backbone: b.clone(), nodes }
    }

    /// Standalone network for `arch` whose weights are copied from this supernet.
    pub fn extract_network(&self, arch: &DiscreteArchitecture) -> Result<Network<T>> {
        self.check_arch(arch)?;
        let mut unused: NtaaRng = rng_for(self.seed, 0);
        Network::new(arch, &mut unused, &WeightSource::Pretrained(&self.store))
    }
}
