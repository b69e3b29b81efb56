//! Ground-truth architecture ratings on enumerable spaces, shared-weight ratings,
//! random selection and rank agreement.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::index::sample;

use crate::arch::{Backbone, DiscreteArchitecture};
use crate::candidates::OperationKind;
use crate::data::Dataset;
use crate::error::{NtaaError, Result};
use crate::objective::ntaa_search_loss;
use crate::pipeline::{
    evaluate_with, fit, phase, train_from_scratch, FitSpec, RunConfig, TransferData,
};
use crate::rng::{rng_for, streams, NtaaRng};
use crate::supernet::{GateInit, SuperNet};
use crate::tensor::{Session, Var};

/// Default bound on the number of enumerated architectures.
pub const DEFAULT_SPACE_CAP: usize = 256;
/// Epoch budget of the under-trained rating column.
pub const UNDER_TRAINED_EPOCHS: usize = 5;

/// Every chain architecture over `candidates`, lexicographic in candidate order
/// (the last node varies fastest).
pub fn enumerate_space(
    backbone: &Backbone,
    candidates: &[OperationKind],
    cap: usize,
) -> Result<Vec<DiscreteArchitecture>> {
    backbone.validate()?;
    let n = backbone.num_nodes();
    let c = candidates.len();
    if c == 0 {
        return Err(NtaaError::config("empty candidate list"));
    }
    let size = u32::try_from(n).ok().and_then(|n| c.checked_pow(n)).filter(|&s| s <= cap);
    let size = size.ok_or_else(|| {
        NtaaError::config(format!("{c}^{n} architectures exceed the cap of {cap}"))
    })?;
    let mut out = Vec::with_capacity(size);
    for mut code in 0..size {
        let mut ops = vec![candidates[0]; n];
        for slot in ops.iter_mut().rev() {
            *slot = candidates[code % c];
            code /= c;
        }
        out.push(DiscreteArchitecture::chain(backbone.clone(), &ops)?);
    }
    Ok(out)
}

/// Short identifier such as `conv3-max_pool3-identity`.
pub fn arch_id(a: &DiscreteArchitecture) -> String {
    a.nodes.iter().map(|n| n.op.name()).collect::<Vec<_>>().join("-")
}

/// Validation accuracy of every architecture trained from scratch for `epochs`.
pub fn brute_force_ratings(
    space: &[DiscreteArchitecture],
    cfg: &RunConfig,
    data: &TransferData,
    epochs: usize,
) -> Result<Vec<f64>> {
    let cfg = RunConfig { finetune_epochs: epochs, ..cfg.clone() };
    space
        .iter()
        .map(|a| Ok(train_from_scratch(a, &cfg, data)?.1.final_val_acc.unwrap_or(0.0)))
        .collect()
}

/// Trains a shared-weight supernet over `candidates` from random initialization with
/// uniform gates and plain cross-entropy.
pub fn train_oracle_supernet(
    backbone: &Backbone,
    candidates: &[OperationKind],
    cfg: &RunConfig,
    data: &TransferData,
    epochs: usize,
) -> Result<SuperNet<f32>> {
    let base =
        DiscreteArchitecture::chain(backbone.clone(), &vec![candidates[0]; backbone.num_nodes()])?;
    let mut net = SuperNet::init_random(&base, candidates, cfg.seed)?;
    net.reset_gates(GateInit::Uniform);
    let loss_cfg = crate::objective::LossConfig {
        lambda: 0.0,
        ..crate::objective::LossConfig::new(net.alpha0_mask())
    };
    let loss = |s: &mut Session<'_, f32>, logits: Var, labels: &[usize]| {
        ntaa_search_loss(s, logits, labels, &[], &loss_cfg)
    };
    let mut spec = FitSpec::new(cfg, epochs, cfg.search_lr, phase::SEARCH);
    spec.noise_estimate_epochs = 1;
    fit(&mut net, &data.target_train, None, &spec, "oracle-search", &loss, &mut |_| {})?;
    Ok(net)
}

/// Validation accuracy of each architecture as a hard subnet of `supernet`, without any update.
pub fn shared_weight_ratings(
    supernet: &SuperNet<f32>,
    space: &[DiscreteArchitecture],
    val: &Dataset,
    batch_size: usize,
) -> Result<Vec<f64>> {
    space
        .iter()
        .map(|a| {
            evaluate_with(&supernet.store, val, batch_size, |s, x| {
                supernet.one_hot_forward(s, a, x)
            })
        })
        .collect()
}

/// Kendall's tau-b. `None` when either side is constant (no ranking exists).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(NtaaError::arg(format!(
            "kendall_tau: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(NtaaError::arg("kendall_tau needs at least two items"));
    }
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = a[i].partial_cmp(&a[j]).ok_or_else(|| NtaaError::arg("kendall_tau on NaN"))?;
            let db = b[i].partial_cmp(&b[j]).ok_or_else(|| NtaaError::arg("kendall_tau on NaN"))?;
            use std::cmp::Ordering::Equal;
            match (da, db) {
                (Equal, Equal) => {}
                (Equal, _) => ties_a += 1,
                (_, Equal) => ties_b += 1,
                _ if da == db => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let denom = (((conc + disc + ties_a) * (conc + disc + ties_b)) as f64).sqrt();
    Ok((denom > 0.0).then(|| (conc - disc) as f64 / denom))
}

/// Mean rating of `n` architectures drawn uniformly without replacement.
pub fn random_selection(ratings: &[f64], n: usize, rng: &mut NtaaRng) -> Result<f64> {
    if n == 0 || n > ratings.len() {
        return Err(NtaaError::arg(format!("cannot draw {n} of {} architectures", ratings.len())));
    }
    let idx = sample(rng, ratings.len(), n);
    Ok(idx.iter().map(|i| ratings[i]).sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    /// Searchable nodes of the single-stage oracle backbone.
    pub nodes: usize,
    pub width: usize,
    pub candidates: Vec<OperationKind>,
    /// From-scratch epochs for the ground-truth column.
    pub epochs: usize,
    pub under_epochs: usize,
    pub search_epochs: usize,
    pub cap: usize,
    pub random_n: usize,
    /// Candidate-set sizes for the fidelity sweep.
    pub sizes: Vec<usize>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            nodes: 3,
            width: 8,
            candidates: vec![
                OperationKind::Conv3,
                OperationKind::MaxPool3,
                OperationKind::Identity,
            ],
            epochs: 15,
            under_epochs: UNDER_TRAINED_EPOCHS,
            search_epochs: 15,
            cap: DEFAULT_SPACE_CAP,
            random_n: 4,
            sizes: vec![1, 2, 3],
        }
    }
}

impl OracleConfig {
    pub fn backbone(&self, in_channels: usize, num_classes: usize) -> Backbone {
        Backbone { in_channels, widths: vec![self.width], nodes: vec![self.nodes], num_classes }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatingTable {
    pub architectures: Vec<DiscreteArchitecture>,
    pub brute_force: Vec<f64>,
    pub shared_weight: Vec<f64>,
    pub under_trained: Vec<f64>,
    pub seeds: Vec<u64>,
    pub tau_shared: Option<f64>,
    pub tau_under: Option<f64>,
    pub random_selection: f64,
    /// Discretized choice of the trained supernet.
    pub supernet_choice: DiscreteArchitecture,
}

impl RatingTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,architecture,brute_force,shared_weight,under_trained\n");
        for (i, a) in self.architectures.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{:?},{:?},{:?}",
                arch_id(a),
                self.brute_force[i],
                self.shared_weight[i],
                self.under_trained[i]
            );
        }
        s
    }

    /// Highest ground-truth architecture; the earliest wins ties.
    pub fn best(&self) -> &DiscreteArchitecture {
        let i = crate::pipeline::argmax(&self.brute_force);
        &self.architectures[i]
    }
}

/// Builds the full rating table over the enumerated space.
pub fn run_oracle(
    cfg: &RunConfig,
    ocfg: &OracleConfig,
    data: &TransferData,
) -> Result<RatingTable> {
    let [c, _, _] = data.target_train.sample_shape();
    let backbone = ocfg.backbone(c, data.target_train.num_classes);
    let space = enumerate_space(&backbone, &ocfg.candidates, ocfg.cap)?;
    let brute_force = brute_force_ratings(&space, cfg, data, ocfg.epochs)?;
    let under_trained = brute_force_ratings(&space, cfg, data, ocfg.under_epochs)?;
    let supernet =
        train_oracle_supernet(&backbone, &ocfg.candidates, cfg, data, ocfg.search_epochs)?;
    let shared_weight = shared_weight_ratings(&supernet, &space, &data.target_val, cfg.batch_size)?;
    let mut rng = rng_for(cfg.seed, streams::ORACLE);
    Ok(RatingTable {
        tau_shared: kendall_tau(&shared_weight, &brute_force)?,
        tau_under: kendall_tau(&under_trained, &brute_force)?,
        random_selection: random_selection(&brute_force, ocfg.random_n.min(space.len()), &mut rng)?,
        supernet_choice: supernet.discretize(),
        architectures: space,
        brute_force,
        shared_weight,
        under_trained,
        seeds: vec![cfg.seed],
    })
}

/// Rank agreement between shared-weight and ground-truth ratings for growing candidate sets
/// (the first `size` entries of `ocfg.candidates`). Ground-truth ratings are shared across sizes.
pub fn rating_fidelity_vs_space_size(
    cfg: &RunConfig,
    ocfg: &OracleConfig,
    data: &TransferData,
) -> Result<Vec<(usize, Option<f64>)>> {
    let [c, _, _] = data.target_train.sample_shape();
    let backbone = ocfg.backbone(c, data.target_train.num_classes);
    let mut truth: HashMap<DiscreteArchitecture, f64> = HashMap::new();
    let mut out = Vec::with_capacity(ocfg.sizes.len());
    for &size in &ocfg.sizes {
        if size == 0 || size > ocfg.candidates.len() {
            return Err(NtaaError::config(format!(
                "candidate-set size {size} outside 1..={}",
                ocfg.candidates.len()
            )));
        }
        let cands = &ocfg.candidates[..size];
        let space = enumerate_space(&backbone, cands, ocfg.cap)?;
        if space.len() < 2 {
            out.push((size, None));
            continue;
        }
        let mut gt = Vec::with_capacity(space.len());
        for a in &space {
            let v = match truth.get(a) {
                Some(&v) => v,
                None => {
                    let v =
                        brute_force_ratings(std::slice::from_ref(a), cfg, data, ocfg.epochs)?[0];
                    truth.insert(a.clone(), v);
                    v
                }
            };
            gt.push(v);
        }
        let supernet = train_oracle_supernet(&backbone, cands, cfg, data, ocfg.search_epochs)?;
        let sw = shared_weight_ratings(&supernet, &space, &data.target_val, cfg.batch_size)?;
        out.push((size, kendall_tau(&sw, &gt)?));
    }
    Ok(out)
}
