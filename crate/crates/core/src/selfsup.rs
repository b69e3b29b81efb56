//! Unsupervised variant: contrastive pretraining of the supernet against the frozen
//! pretrained network, then architecture search by linear evaluation.

use std::collections::VecDeque;
use std::time::Instant;

use rand::Rng;

use crate::data::{Batches, Dataset};
use crate::error::{NtaaError, Result};
use crate::network::Network;
use crate::objective::{infonce_in_batch, ntaa_search_loss, weight_decay_for};
use crate::persist::Checkpoint;
use crate::pipeline::{fit, phase, FitSpec, RunConfig, RunReport, TransferData};
use crate::rng::{normal, rng_for_salted, streams, NtaaRng};
use crate::supernet::{GateInit, SuperNet};
use crate::tensor::{
    Element, Mode, ParamId, ParamKind, ParamStore, Schedule, Session, SgdState, Tensor, Var,
};

/// Phase tag of the reusable contrastively trained supernet checkpoint.
pub const SUPER_ALPHA0_PHASE: &str = "super-alpha0";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Range of the crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub noise_std: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { crop_scale: (0.6, 1.0), flip_prob: 0.5, noise_std: 0.05 }
    }
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec =
        AugmentSpec { crop_scale: (1.0, 1.0), flip_prob: 0.0, noise_std: 0.0 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// FIFO of past keys used as extra negatives; 0 means in-batch negatives only.
    pub queue_size: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub augment: AugmentSpec,
    pub epochs: usize,
    pub lr: f64,
    /// Whether the gates are trained along with the weights.
    pub train_theta: bool,
    pub linear_epochs: usize,
    pub linear_lr: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: crate::objective::DEFAULT_TAU,
            queue_size: 1024,
            proj_hidden: 128,
            proj_dim: 64,
            augment: AugmentSpec::default(),
            epochs: 10,
            lr: 0.03,
            train_theta: true,
            linear_epochs: 10,
            linear_lr: 0.05,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(NtaaError::config("tau must be > 0"));
        }
        if self.queue_size != 0 && self.queue_size < batch_size {
            return Err(NtaaError::config(format!(
                "queue size {} must be 0 or at least the batch size {batch_size}",
                self.queue_size
            )));
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 {
            return Err(NtaaError::config("projection sizes must be positive"));
        }
        let (lo, hi) = self.augment.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(NtaaError::config("crop scale must satisfy 0 < min <= max <= 1"));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) || self.augment.noise_std < 0.0 {
            return Err(NtaaError::config("flip probability must be in [0,1] and noise std >= 0"));
        }
        Ok(())
    }
}

/// Two independent augmentations of every image in `x[N,C,H,W]`.
pub fn augment_views(
    x: &Tensor<f32>,
    spec: &AugmentSpec,
    rng: &mut NtaaRng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(NtaaError::shape(format!(
            "augment_views expects [N,C,H,W], got {:?}",
            x.shape()
        )));
    };
    let per = c * h * w;
    let mut v1 = Vec::with_capacity(x.numel());
    let mut v2 = Vec::with_capacity(x.numel());
    for img in x.data().chunks(per.max(1)).take(n) {
        v1.extend(augment_one(img, c, h, w, spec, rng));
        v2.extend(augment_one(img, c, h, w, spec, rng));
    }
    Ok((Tensor::new(x.shape(), v1)?, Tensor::new(x.shape(), v2)?))
}

fn augment_one(
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    spec: &AugmentSpec,
    rng: &mut NtaaRng,
) -> Vec<f32> {
    let (lo, hi) = spec.crop_scale;
    let area = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let side = area.sqrt();
    let ch = ((side * h as f64).round() as usize).clamp(1, h);
    let cw = ((side * w as f64).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let flip = rng.random_bool(spec.flip_prob);
    let mut out =
        if ch == h && cw == w { img.to_vec() } else { resize_crop(img, c, h, w, (y0, x0, ch, cw)) };
    if flip {
        for row in out.chunks_mut(w) {
            row.reverse();
        }
    }
    if spec.noise_std > 0.0 {
        for v in &mut out {
            *v += (spec.noise_std * normal(rng)) as f32;
        }
    }
    out
}

/// Bilinear resize of the crop `(y0, x0, ch, cw)` back to `h x w`.
fn resize_crop(
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    (y0, x0, ch, cw): (usize, usize, usize, usize),
) -> Vec<f32> {
    let coord = |i: usize, out: usize, len: usize, start: usize| {
        let s = ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = s.floor() as usize;
        (start + lo, start + (lo + 1).min(len - 1), s - lo as f64)
    };
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        let (ya, yb, fy) = coord(y, h, ch, y0);
        for x in 0..w {
            let (xa, xb, fx) = coord(x, w, cw, x0);
            for k in 0..c {
                let p = |yy: usize, xx: usize| img[(k * h + yy) * w + xx] as f64;
                let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
                let bot = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
                out[(k * h + y) * w + x] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

/// Two-layer MLP `features -> hidden -> dim` with ReLU, followed by row normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ProjectionHead {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        dim: usize,
        rng: &mut NtaaRng,
    ) -> Result<Self> {
        let mut he = |o: usize, i: usize| {
            Tensor::from_fn(&[o, i], |_| T::c(normal(rng) * (2.0 / i as f64).sqrt()))
        };
        let (w1, w2) = (he(hidden, input), he(dim, hidden));
        Ok(ProjectionHead {
            w1: store.add(format!("{prefix}.fc1.weight"), ParamKind::HeadWeight, w1)?,
            b1: store.add(
                format!("{prefix}.fc1.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[hidden]),
            )?,
            w2: store.add(format!("{prefix}.fc2.weight"), ParamKind::HeadWeight, w2)?,
            b2: store.add(format!("{prefix}.fc2.bias"), ParamKind::Bias, Tensor::zeros(&[dim]))?,
        })
    }

    /// Registers a copy of `self` (read from `from`) in `store` under `prefix`.
    pub fn copy_into<T: Element>(
        &self,
        from: &ParamStore<T>,
        store: &mut ParamStore<T>,
        prefix: &str,
    ) -> Result<Self> {
        let mut put = |id: ParamId, suffix: &str| {
            let p = from.param(id);
            store.add(format!("{prefix}.{suffix}"), p.kind, p.tensor.clone())
        };
        Ok(ProjectionHead {
            w1: put(self.w1, "fc1.weight")?,
            b1: put(self.b1, "fc1.bias")?,
            w2: put(self.w2, "fc2.weight")?,
            b2: put(self.b2, "fc2.bias")?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Unit-norm embeddings `[N, dim]`.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, features: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (s.var(self.w1), s.var(self.b1), s.var(self.w2), s.var(self.b2));
        let h = s.graph.linear(features, w1, b1)?;
        let h = s.graph.relu(h)?;
        let z = s.graph.linear(h, w2, b2)?;
        s.graph.l2_normalize_rows(z)
    }
}

/// The fixed pretrained network plus a frozen projection head.
pub struct KeyEncoder {
    pub network: Network<f32>,
    pub proj: ProjectionHead,
}

impl KeyEncoder {
    /// Unit-norm key embeddings, computed in eval mode without gradients.
    pub fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut rng = crate::rng::rng_for(0, 0);
        let mut s = Session::new(&self.network.store, Mode::Eval, &mut rng);
        let xv = s.input(x.clone());
        let f = self.network.features(&mut s, xv)?;
        let z = self.proj.forward(&mut s, f)?;
        Ok(s.graph.value(z).clone())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastiveReport {
    /// Mean InfoNCE per epoch.
    pub epoch_loss: Vec<f64>,
    pub optimizer_steps: usize,
    pub trainable_params: usize,
    pub negatives_per_query: Vec<usize>,
    pub wall_clock_secs: f64,
}

pub struct UnsupOutcome {
    pub supernet: SuperNet<f32>,
    pub checkpoint: Checkpoint,
    pub report: ContrastiveReport,
}

/// Contrastive training of the supernet (query side) against the frozen pretrained
/// network (key side). The result is saved as the reusable "super alpha0" checkpoint.
pub fn unsup_pretrain_supernet(
    mut supernet: SuperNet<f32>,
    pretrained: &dyn crate::candidates::TensorSource<f32>,
    unlabeled: &Dataset,
    cfg: &RunConfig,
    ccfg: &ContrastiveConfig,
) -> Result<UnsupOutcome> {
    ccfg.validate(cfg.batch_size)?;
    let started = Instant::now();
    let feat = *supernet.backbone().widths.last().expect("validated backbone");
    let mut init_rng = rng_for_salted(cfg.seed, phase::CONTRASTIVE, streams::INIT);
    let qproj = ProjectionHead::init(
        &mut supernet.store,
        "proj",
        feat,
        ccfg.proj_hidden,
        ccfg.proj_dim,
        &mut init_rng,
    )?;
    let mut key_net = Network::from_source(&supernet.alpha0, pretrained)?;
    let kproj = qproj.copy_into(&supernet.store, &mut key_net.store, "proj")?;
    key_net.store.freeze_where(true, |_, _| true);
    let key = KeyEncoder { network: key_net, proj: kproj };
    let key_snapshot = key.network.store.snapshot(|_| true);
    if !ccfg.train_theta {
        for id in supernet.theta_ids().into_iter().chain(supernet.beta_ids()) {
            supernet.store.set_frozen(id, true);
        }
    }

    let per_epoch = unlabeled.len().div_ceil(cfg.batch_size);
    let schedule = if cfg.cosine {
        Schedule::Cosine { total_steps: ccfg.epochs * per_epoch }
    } else {
        Schedule::Constant
    };
    let mut opt =
        SgdState::<f32>::new(ccfg.lr, cfg.momentum, weight_decay_for(cfg.lambda), schedule)?;
    let mut rng = rng_for_salted(cfg.seed, phase::CONTRASTIVE, streams::TRAIN);
    let mut aug_rng = rng_for_salted(cfg.seed, phase::CONTRASTIVE, streams::AUGMENT);
    let mut queue: VecDeque<Vec<f32>> = VecDeque::with_capacity(ccfg.queue_size);
    let mut report = ContrastiveReport {
        trainable_params: supernet.store.trainable_count(),
        ..Default::default()
    };
    let shuffle = cfg.seed.wrapping_mul(0x100).wrapping_add(phase::CONTRASTIVE);
    for epoch in 0..ccfg.epochs {
        let mut total = 0.0;
        for batch in Batches::new(unlabeled, cfg.batch_size, Some(shuffle), epoch as u64, false)? {
            let n = batch.labels.len();
            let (v1, v2) = augment_views(&batch.x, &ccfg.augment, &mut aug_rng)?;
            let keys = key.embed(&v2)?;
            let mut s = Session::new(&supernet.store, Mode::Train, &mut rng);
            s.estimate_noise = epoch == 0;
            let x = s.input(v1);
            let f = supernet.features(&mut s, x)?;
            let q = qproj.forward(&mut s, f)?;
            let k = s.input(keys.clone());
            let queue_var = (!queue.is_empty()).then(|| {
                let flat: Vec<f32> = queue.iter().flatten().copied().collect();
                s.input(Tensor::new(&[queue.len(), ccfg.proj_dim], flat).expect("queue rows"))
            });
            if report.negatives_per_query.len() <= epoch {
                report.negatives_per_query.push(n - 1 + queue.len());
            }
            let loss = infonce_in_batch(&mut s.graph, q, k, queue_var, ccfg.tau)?;
            let step = s.backward(loss)?;
            total += step.loss * n as f64;
            supernet.store.zero_grad();
            supernet.store.accumulate(&step.grads)?;
            opt.step(&mut supernet.store, report.optimizer_steps)?;
            supernet.store.apply_updates(&step.updates);
            report.optimizer_steps += 1;
            if ccfg.queue_size > 0 {
                for row in keys.data().chunks(ccfg.proj_dim) {
                    if queue.len() == ccfg.queue_size {
                        queue.pop_front();
                    }
                    queue.push_back(row.to_vec());
                }
            }
        }
        report.epoch_loss.push(total / unlabeled.len().max(1) as f64);
    }
    let changed = key.network.store.changed_since(&key_snapshot);
    if !changed.is_empty() {
        return Err(NtaaError::Internal(format!("key encoder modified: {}", changed.join(", "))));
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    let cand: Vec<&str> = supernet.candidate_set.iter().map(|k| k.name()).collect();
    let checkpoint = Checkpoint::from_store(&supernet.store, SUPER_ALPHA0_PHASE, cfg.seed)
        .with_meta("arch", supernet.alpha0.to_text())
        .with_meta("candidates", cand.join(","));
    Ok(UnsupOutcome { supernet, checkpoint, report })
}

/// Restores the supernet from a super-alpha0 checkpoint, resets every gate to uniform,
/// re-initializes the classifier, and trains only gates and classifier on the target
/// with all operation weights and normalization statistics frozen.
pub fn linear_eval_search(
    super_alpha0: &Checkpoint,
    cfg: &RunConfig,
    ccfg: &ContrastiveConfig,
    data: &TransferData,
) -> Result<(SuperNet<f32>, RunReport)> {
    let started = Instant::now();
    let alpha0 = cfg.alpha0()?;
    let mut net = SuperNet::from_source(&alpha0, super_alpha0, &cfg.candidates, cfg.seed)?;
    net.reset_gates(GateInit::Uniform);
    let mut rng = rng_for_salted(cfg.seed, phase::LINEAR, streams::INIT);
    let c = net.store.get(net.trunk.head_weight).shape()[1];
    let std = (1.0 / c as f64).sqrt();
    for v in net.store.get_mut(net.trunk.head_weight).data_mut() {
        *v = (normal(&mut rng) * std) as f32;
    }
    net.store.get_mut(net.trunk.head_bias).data_mut().fill(0.0);
    let (hw, hb) = (net.trunk.head_weight, net.trunk.head_bias);
    let open: Vec<ParamId> =
        net.theta_ids().into_iter().chain(net.beta_ids()).chain([hw, hb]).collect();
    let ids: Vec<ParamId> = net.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        net.store.set_frozen(id, !open.contains(&id));
    }
    let frozen = net.store.snapshot(|p| p.frozen());

    let mut report = crate::pipeline::RunReport {
        kind: "linear-search".into(),
        seed: cfg.seed,
        ..Default::default()
    };
    report.trainable_params = net.store.trainable_count();
    report.initial_val_acc =
        Some(crate::pipeline::evaluate(&net, &data.target_val, cfg.batch_size)?);
    let loss_cfg = cfg.loss_config(net.alpha0_mask());
    let theta_ids = net.theta_ids();
    let loss = |s: &mut Session<'_, f32>, logits: Var, labels: &[usize]| {
        ntaa_search_loss(s, logits, labels, &theta_ids, &loss_cfg)
    };
    let mut spec = FitSpec::new(cfg, ccfg.linear_epochs, ccfg.linear_lr, phase::LINEAR);
    spec.mode = Mode::Eval;
    let nodes = net.nodes.clone();
    let mut traj = Vec::new();
    let mut record = |store: &ParamStore<f32>| {
        traj.push(nodes.iter().map(|n| store.get(n.theta).to_f64_vec()).collect::<Vec<_>>());
    };
    let out = fit(
        &mut net,
        &data.target_train,
        Some(&data.target_val),
        &spec,
        "linear-search",
        &loss,
        &mut record,
    )?;
    let changed = net.store.changed_since(&frozen);
    if !changed.is_empty() {
        return Err(NtaaError::Internal(format!(
            "frozen tensors modified: {}",
            changed.join(", ")
        )));
    }
    for id in net.store.iter().map(|(id, _)| id).collect::<Vec<_>>() {
        net.store.set_frozen(id, false);
    }
    report.theta_trajectory = traj;
    report.final_val_acc = out.epochs.last().and_then(|e| e.val_acc).or(report.initial_val_acc);
    report.optimizer_steps = out.steps;
    report.epochs = out.epochs;
    let arch = net.discretize();
    report.effective_depth = Some(arch.effective_depth());
    report.architecture = Some(arch);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((net, report))
}
