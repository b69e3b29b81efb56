//! The transfer pipeline: source pretraining, joint weight/architecture search,
//! discretize-and-finetune, and the fixed-architecture and from-scratch baselines.

use std::time::Instant;

use serde_json::{json, Map, Value};

use crate::arch::{Backbone, DiscreteArchitecture};
use crate::candidates::{OperationKind, TensorSource, WeightSource};
use crate::data::{synth_generate, Batches, Dataset, SyntheticTaskSpec};
use crate::error::{NtaaError, Result};
use crate::network::Network;
use crate::objective::{ntaa_search_loss, weight_decay_for, LossConfig};
use crate::persist::{Checkpoint, ReportLog};
use crate::rng::{rng_for, rng_for_salted, streams, NtaaRng};
use crate::supernet::SuperNet;
use crate::tensor::{Element, Mode, ParamStore, Schedule, Session, SgdState, Var};

/// Salts separating the randomness of different phases run with one seed.
pub mod phase {
    pub const PRETRAIN: u64 = 1;
    pub const SEARCH: u64 = 2;
    /// Shared by every loop that trains a discrete network on the target task.
    pub const FINETUNE: u64 = 3;
    pub const SCRATCH_INIT: u64 = 4;
    pub const LINEAR: u64 = 5;
    pub const CONTRASTIVE: u64 = 6;
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: Backbone,
    /// Operation of every node of the pretrained chain.
    pub alpha0_ops: Vec<OperationKind>,
    /// Candidates offered at every node during search.
    pub candidates: Vec<OperationKind>,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub search_epochs: usize,
    pub finetune_epochs: usize,
    pub pretrain_lr: f64,
    pub search_lr: f64,
    pub finetune_lr: f64,
    pub momentum: f64,
    /// Cosine decay to zero over each phase; otherwise constant.
    pub cosine: bool,
    pub lambda: f64,
    /// Fraction of the target training set held out for validation.
    pub val_fraction: f64,
    /// Pad-and-crop plus flip on training batches.
    pub augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = Backbone::mini_res(4, 4, 4);
        RunConfig {
            seed: 0,
            alpha0_ops: vec![OperationKind::Conv3; backbone.num_nodes()],
            backbone,
            candidates: OperationKind::ALL.to_vec(),
            batch_size: 32,
            pretrain_epochs: 30,
            search_epochs: 30,
            finetune_epochs: 30,
            pretrain_lr: 0.05,
            search_lr: 0.05,
            finetune_lr: 0.02,
            momentum: 0.9,
            cosine: true,
            lambda: crate::objective::DEFAULT_LAMBDA,
            val_fraction: 0.2,
            augment: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.alpha0_ops.len() != self.backbone.num_nodes() {
            return Err(NtaaError::config(format!(
                "alpha0 lists {} ops for {} nodes",
                self.alpha0_ops.len(),
                self.backbone.num_nodes()
            )));
        }
        if self.batch_size == 0 {
            return Err(NtaaError::config("batch size must be >= 1"));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(NtaaError::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for (name, lr) in [
            ("pretrain", self.pretrain_lr),
            ("search", self.search_lr),
            ("finetune", self.finetune_lr),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(NtaaError::config(format!(
                    "{name} learning rate must be finite and >= 0"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(NtaaError::config("validation fraction must be in [0,1)"));
        }
        Ok(())
    }

    /// The pretrained chain architecture.
    pub fn alpha0(&self) -> Result<DiscreteArchitecture> {
        self.validate()?;
        DiscreteArchitecture::chain(self.backbone.clone(), &self.alpha0_ops)
    }

    pub fn loss_config(&self, mask: Vec<Vec<bool>>) -> LossConfig {
        LossConfig { lambda: self.lambda, ..LossConfig::new(mask) }
    }
}

/// Source and target splits for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferData {
    pub source_train: Dataset,
    pub source_val: Dataset,
    /// Target training split after removing the validation hold-out.
    pub target_train: Dataset,
    pub target_val: Dataset,
    pub target_test: Dataset,
}

impl TransferData {
    /// Synthetic task; the target validation set is a seeded hold-out of the target training data.
    pub fn synthetic(spec: &SyntheticTaskSpec, val_fraction: f64, split_seed: u64) -> Result<Self> {
        let task = synth_generate(spec)?;
        Self::from_splits(
            task.source_train,
            task.source_val,
            task.target_train,
            task.target_val,
            val_fraction,
            split_seed,
        )
    }

    pub fn from_splits(
        source_train: Dataset,
        source_val: Dataset,
        target_train: Dataset,
        target_test: Dataset,
        val_fraction: f64,
        split_seed: u64,
    ) -> Result<Self> {
        if source_train.num_classes != target_train.num_classes {
            return Err(NtaaError::config("source and target must share the label space"));
        }
        let (train, val) = target_train.split_validation(val_fraction, split_seed)?;
        Ok(TransferData {
            source_train,
            source_val,
            target_train: train,
            target_val: val,
            target_test,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub kind: String,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// `[epoch][node][candidate]` logits, recorded after every search epoch.
    pub theta_trajectory: Vec<Vec<Vec<f64>>>,
    pub architecture: Option<DiscreteArchitecture>,
    pub effective_depth: Option<usize>,
    pub param_count: Option<usize>,
    pub trainable_params: usize,
    pub optimizer_steps: usize,
    /// Validation accuracy before the phase's first update.
    pub initial_val_acc: Option<f64>,
    pub final_val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// Not serialized: it would break byte-identical reruns.
    pub wall_clock_secs: f64,
}

impl RunReport {
    fn new(kind: &str, seed: u64) -> Self {
        RunReport { kind: kind.into(), seed, ..Default::default() }
    }

    /// Per-epoch, per-theta and summary records.
    pub fn to_log(&self) -> ReportLog {
        let mut log = ReportLog::new();
        for e in &self.epochs {
            log.push(
                "epoch",
                obj(json!({
                    "run": self.kind, "phase": e.phase, "epoch": e.epoch, "loss": e.loss,
                    "train_acc": e.train_acc, "val_acc": e.val_acc,
                })),
            );
        }
        for (epoch, th) in self.theta_trajectory.iter().enumerate() {
            log.push("theta", obj(json!({ "run": self.kind, "epoch": epoch, "theta": th })));
        }
        log.push(
            "summary",
            obj(json!({
                "run": self.kind,
                "seed": self.seed,
                "architecture": self.architecture.as_ref().map(|a| a.to_text()),
                "effective_depth": self.effective_depth,
                "param_count": self.param_count,
                "trainable_params": self.trainable_params,
                "optimizer_steps": self.optimizer_steps,
                "initial_val_acc": self.initial_val_acc,
                "final_val_acc": self.final_val_acc,
                "test_acc": self.test_acc,
            })),
        );
        log
    }
}

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

/// Anything with parameters in a store and a logits forward.
pub trait Model<T: Element> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    /// Logits `[N, classes]`. Parameters must be read through the session only.
    fn logits(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var>;
}

impl<T: Element> Model<T> for Network<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
    fn logits(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        self.forward(s, x)
    }
}

impl<T: Element> Model<T> for SuperNet<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
    fn logits(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        self.forward(s, x)
    }
}

/// One training loop's settings.
#[derive(Clone, Debug, PartialEq)]
pub struct FitSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub augment: bool,
    pub seed: u64,
    /// Salt from [`phase`]; selects the shuffle order and the stochastic-op stream.
    pub phase: u64,
    /// Forward mode during training. `Eval` trains on top of frozen normalization statistics.
    pub mode: Mode,
    /// Epochs at the start during which noise ops estimate their scale.
    pub noise_estimate_epochs: usize,
}

impl FitSpec {
    pub fn new(cfg: &RunConfig, epochs: usize, lr: f64, phase: u64) -> Self {
        FitSpec {
            epochs,
            batch_size: cfg.batch_size,
            lr,
            momentum: cfg.momentum,
            weight_decay: weight_decay_for(cfg.lambda),
            cosine: cfg.cosine,
            augment: cfg.augment,
            seed: cfg.seed,
            phase,
            mode: Mode::Train,
            noise_estimate_epochs: 0,
        }
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x100).wrapping_add(self.phase)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub steps: usize,
}

pub type LossFn<'a, T> = dyn Fn(&mut Session<'_, T>, Var, &[usize]) -> Result<Var> + 'a;

/// Plain cross-entropy.
pub fn ce_loss<T: Element>(s: &mut Session<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
    s.graph.cross_entropy(logits, labels)
}

/// Minibatch SGD over `train`. With `lr = 0` the model is left exactly as it was,
/// running statistics included. `on_epoch` sees the parameters after every epoch.
pub fn fit<T: Element, M: Model<T>>(
    model: &mut M,
    train: &Dataset,
    val: Option<&Dataset>,
    spec: &FitSpec,
    phase_name: &str,
    loss: &LossFn<'_, T>,
    on_epoch: &mut dyn FnMut(&ParamStore<T>),
) -> Result<FitOutcome> {
    let mut store = std::mem::take(model.store_mut());
    let res = fit_inner(&*model, &mut store, train, val, spec, phase_name, loss, on_epoch);
    *model.store_mut() = store;
    res
}

#[allow(clippy::too_many_arguments)]
fn fit_inner<T: Element, M: Model<T>>(
    model: &M,
    store: &mut ParamStore<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    spec: &FitSpec,
    phase_name: &str,
    loss: &LossFn<'_, T>,
    on_epoch: &mut dyn FnMut(&ParamStore<T>),
) -> Result<FitOutcome> {
    if spec.batch_size == 0 {
        return Err(NtaaError::config("batch size must be >= 1"));
    }
    let per_epoch = train.len().div_ceil(spec.batch_size);
    let schedule = if spec.cosine {
        Schedule::Cosine { total_steps: spec.epochs * per_epoch }
    } else {
        Schedule::Constant
    };
    let mut opt = SgdState::<T>::new(spec.lr, spec.momentum, spec.weight_decay, schedule)?;
    let mut rng = rng_for_salted(spec.seed, spec.phase, streams::TRAIN);
    let mut out = FitOutcome::default();
    for epoch in 0..spec.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let batches = Batches::new(
            train,
            spec.batch_size,
            Some(spec.shuffle_seed()),
            epoch as u64,
            spec.augment,
        )?;
        for batch in batches {
            let mut s = Session::new(store, spec.mode, &mut rng);
            s.estimate_noise = epoch < spec.noise_estimate_epochs;
            let x = s.input(batch.x_as::<T>());
            let logits = model.logits(&mut s, x)?;
            correct += count_correct(s.graph.value(logits).data(), &batch.labels);
            let l = loss(&mut s, logits, &batch.labels)?;
            let step = s.backward(l)?;
            loss_sum += step.loss * batch.labels.len() as f64;
            if spec.lr > 0.0 {
                store.zero_grad();
                store.accumulate(&step.grads)?;
                opt.step(store, out.steps)?;
                store.apply_updates(&step.updates);
            }
            out.steps += 1;
        }
        let n = train.len().max(1) as f64;
        let val_acc = match val {
            Some(v) => Some(evaluate_with(store, v, spec.batch_size, |s, x| model.logits(s, x))?),
            None => None,
        };
        let m = EpochMetrics {
            phase: phase_name.into(),
            epoch,
            loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc,
        };
        if !m.loss.is_finite() {
            return Err(NtaaError::NonFinite(format!("{phase_name} loss at epoch {epoch}")));
        }
        out.epochs.push(m);
        on_epoch(store);
    }
    Ok(out)
}

fn count_correct<T: Element>(logits: &[T], labels: &[usize]) -> usize {
    if labels.is_empty() {
        return 0;
    }
    let c = logits.len() / labels.len();
    logits.chunks(c).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode accuracy of `forward` over `ds`; 0 for an empty set.
pub fn evaluate_with<T: Element>(
    store: &ParamStore<T>,
    ds: &Dataset,
    batch_size: usize,
    forward: impl Fn(&mut Session<'_, T>, Var) -> Result<Var>,
) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut rng = rng_for(0, 0);
    let mut correct = 0;
    for batch in Batches::new(ds, batch_size.max(1), None, 0, false)? {
        let mut s = Session::new(store, Mode::Eval, &mut rng);
        let x = s.input(batch.x_as::<T>());
        let logits = forward(&mut s, x)?;
        correct += count_correct(s.graph.value(logits).data(), &batch.labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn evaluate<T: Element, M: Model<T>>(
    model: &M,
    ds: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    evaluate_with(model.store(), ds, batch_size, |s, x| model.logits(s, x))
}

fn finish_report(r: &mut RunReport, fit: FitOutcome, started: Instant) {
    r.optimizer_steps += fit.steps;
    r.epochs.extend(fit.epochs);
    r.wall_clock_secs += started.elapsed().as_secs_f64();
}

pub struct Pretrained {
    pub network: Network<f32>,
    pub checkpoint: Checkpoint,
    pub report: RunReport,
}

/// Trains the pretrained chain from scratch on the source task.
pub fn pretrain_source(cfg: &RunConfig, data: &TransferData) -> Result<Pretrained> {
    if cfg.pretrain_epochs == 0 {
        return Err(NtaaError::config("pretrain budget must be at least one epoch"));
    }
    let started = Instant::now();
    let arch = cfg.alpha0()?;
    let mut rng = rng_for_salted(cfg.seed, phase::PRETRAIN, streams::INIT);
    let mut net = Network::<f32>::new(&arch, &mut rng, &WeightSource::HeNormal)?;
    let spec = FitSpec::new(cfg, cfg.pretrain_epochs, cfg.pretrain_lr, phase::PRETRAIN);
    let fit = fit(
        &mut net,
        &data.source_train,
        Some(&data.source_val),
        &spec,
        "pretrain",
        &ce_loss,
        &mut |_| {},
    )?;
    let mut report = RunReport::new("pretrain", cfg.seed);
    report.final_val_acc = fit.epochs.last().and_then(|e| e.val_acc);
    finish_report(&mut report, fit, started);
    report.architecture = Some(arch.clone());
    report.effective_depth = Some(arch.effective_depth());
    report.param_count = Some(net.param_count());
    report.trainable_params = net.store.trainable_count();
    let source_train_acc = evaluate(&net, &data.source_train, cfg.batch_size)?;
    let checkpoint = Checkpoint::from_store(&net.store, "pretrain", cfg.seed)
        .with_meta("arch", arch.to_text())
        .with_meta("source_val_acc", format!("{:?}", report.final_val_acc.unwrap_or(0.0)))
        .with_meta("source_train_acc", format!("{source_train_acc:?}"));
    Ok(Pretrained { network: net, checkpoint, report })
}

/// Builds the supernet around the pretrained chain and jointly trains weights and gates
/// on the target training split.
pub fn search_phase(
    pretrained: &dyn TensorSource<f32>,
    cfg: &RunConfig,
    data: &TransferData,
) -> Result<(SuperNet<f32>, RunReport)> {
    let started = Instant::now();
    let alpha0 = cfg.alpha0()?;
    let mut net = SuperNet::init_from_pretrained(&alpha0, pretrained, &cfg.candidates, cfg.seed)?;
    let mut report = RunReport::new("search", cfg.seed);
    report.initial_val_acc = Some(evaluate(&net, &data.target_val, cfg.batch_size)?);
    report.trainable_params = net.store.trainable_count();
    let loss_cfg = cfg.loss_config(net.alpha0_mask());
    let theta_ids = net.theta_ids();
    let loss = |s: &mut Session<'_, f32>, logits: Var, labels: &[usize]| {
        ntaa_search_loss(s, logits, labels, &theta_ids, &loss_cfg)
    };
    let mut spec = FitSpec::new(cfg, cfg.search_epochs, cfg.search_lr, phase::SEARCH);
    spec.noise_estimate_epochs = 1;
    let nodes = net.nodes.clone();
    let mut traj = Vec::with_capacity(cfg.search_epochs);
    let mut record = |store: &ParamStore<f32>| {
        traj.push(nodes.iter().map(|n| store.get(n.theta).to_f64_vec()).collect::<Vec<_>>());
    };
    let fit = fit(
        &mut net,
        &data.target_train,
        Some(&data.target_val),
        &spec,
        "search",
        &loss,
        &mut record,
    )?;
    report.theta_trajectory = traj;
    report.final_val_acc = fit.epochs.last().and_then(|e| e.val_acc).or(report.initial_val_acc);
    finish_report(&mut report, fit, started);
    let arch = net.discretize();
    report.effective_depth = Some(arch.effective_depth());
    report.architecture = Some(arch);
    Ok((net, report))
}

pub struct Finalized {
    pub architecture: DiscreteArchitecture,
    pub network: Network<f32>,
    pub report: RunReport,
}

/// Finetunes a discrete network on the target training split with the shared finetune loop.
pub fn finetune_network(
    net: &mut Network<f32>,
    cfg: &RunConfig,
    data: &TransferData,
    kind: &str,
) -> Result<RunReport> {
    let started = Instant::now();
    let mut report = RunReport::new(kind, cfg.seed);
    report.initial_val_acc = Some(evaluate(net, &data.target_val, cfg.batch_size)?);
    report.trainable_params = net.store.trainable_count();
    let spec = FitSpec::new(cfg, cfg.finetune_epochs, cfg.finetune_lr, phase::FINETUNE);
    let fit = fit(
        net,
        &data.target_train,
        Some(&data.target_val),
        &spec,
        "finetune",
        &ce_loss,
        &mut |_| {},
    )?;
    report.final_val_acc = fit.epochs.last().and_then(|e| e.val_acc).or(report.initial_val_acc);
    finish_report(&mut report, fit, started);
    report.test_acc = Some(evaluate(net, &data.target_test, cfg.batch_size)?);
    report.architecture = Some(net.arch.clone());
    report.effective_depth = Some(net.effective_depth());
    report.param_count = Some(net.param_count());
    Ok(report)
}

/// Discretizes, extracts the selected subnet with its searched weights and finetunes it.
pub fn finalize(
    supernet: &SuperNet<f32>,
    cfg: &RunConfig,
    data: &TransferData,
) -> Result<Finalized> {
    let architecture = supernet.discretize();
    let mut network = supernet.extract_network(&architecture)?;
    let report = finetune_network(&mut network, cfg, data, "finalize")?;
    Ok(Finalized { architecture, network, report })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WpfMode {
    /// Every weight is finetuned.
    Full,
    /// The stem and the first stage stay frozen.
    Partial,
}

/// Finetunes the pretrained chain on the target with its architecture fixed.
pub fn wpf_baseline(
    pretrained: &dyn TensorSource<f32>,
    cfg: &RunConfig,
    data: &TransferData,
    mode: WpfMode,
) -> Result<(Network<f32>, RunReport)> {
    let arch = cfg.alpha0()?;
    let mut net = Network::from_source(&arch, pretrained)?;
    if mode == WpfMode::Partial {
        for id in net.stage_param_ids(0) {
            net.store.set_frozen(id, true);
        }
    }
    let kind = match mode {
        WpfMode::Full => "wpf-full",
        WpfMode::Partial => "wpf-partial",
    };
    let report = finetune_network(&mut net, cfg, data, kind)?;
    Ok((net, report))
}

/// Random initialization, then the same loop as [`finalize`]'s finetuning.
pub fn train_from_scratch(
    arch: &DiscreteArchitecture,
    cfg: &RunConfig,
    data: &TransferData,
) -> Result<(Network<f32>, RunReport)> {
    let mut rng: NtaaRng = rng_for_salted(cfg.seed, phase::SCRATCH_INIT, streams::INIT);
    let mut net = Network::new(arch, &mut rng, &WeightSource::HeNormal)?;
    let report = finetune_network(&mut net, cfg, data, "scratch")?;
    Ok((net, report))
}

/// Full supervised run: pretrain, search, finalize.
pub struct AdaptOutcome {
    pub pretrained: Pretrained,
    pub search: RunReport,
    pub finalized: Finalized,
}

pub fn adapt(cfg: &RunConfig, data: &TransferData) -> Result<AdaptOutcome> {
    let pretrained = pretrain_source(cfg, data)?;
    let (supernet, search) = search_phase(&pretrained.checkpoint, cfg, data)?;
    let finalized = finalize(&supernet, cfg, data)?;
    Ok(AdaptOutcome { pretrained, search, finalized })
}
