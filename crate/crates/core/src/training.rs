//! SGD with momentum, step learning-rate schedule, early stopping on
//! validation accuracy, and per-method loss assembly.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, cross_entropy, domain_aware_decode, domain_aware_labels, joint_group_count, joint_group_index,
    sd_penalty_with, LossOut, MethodKind, SdSchedule,
};
use crate::model::{backward_with, forward_with, init, Activations, ModelConfig, ModelParams, ParamGrads, Upstream};
use crate::numkit::{argmax, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub method: MethodKind,
    pub sd_lambda: f64,
    pub sd_anneal_steps: usize,
    pub sd_schedule: SdSchedule,
    pub rev_lambda: f64,
    /// Attributes whose joint groups form the domain label. Empty means all.
    pub domain_attributes: Vec<String>,
    /// Seed of the batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            lr_step: 10,
            lr_gamma: 0.5,
            method: MethodKind::CeBaseline,
            sd_lambda: 2e-5,
            sd_anneal_steps: 400,
            sd_schedule: SdSchedule::Ramp,
            rev_lambda: 1.0,
            domain_attributes: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return bad("lr_gamma must be positive");
        }
        if !(self.sd_lambda >= 0.0 && self.sd_lambda.is_finite()) {
            return bad("sd_lambda must be non-negative");
        }
        if !(self.rev_lambda >= 0.0 && self.rev_lambda.is_finite()) {
            return bad("rev_lambda must be non-negative");
        }
        Ok(())
    }
}

/// Step schedule: `lr * gamma^floor(epoch / lr_step)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.lr_step == 0 {
        return cfg.lr;
    }
    let decays = (epoch / cfg.lr_step) as i32;
    cfg.lr * libm::pow(cfg.lr_gamma, decays as f64)
}

/// Heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
pub fn sgd_step(params: &mut ModelParams, velocity: &mut ModelParams, grads: &ParamGrads, lr: f64, momentum: f64) {
    let grads = grads.named_tensors();
    let mut params = params.tensors_mut();
    let mut velocity = velocity.tensors_mut();
    for ((theta, v), (_, _, g)) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for ((t, vk), &gk) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            *vk = momentum * *vk + gk;
            *t -= lr * *vk;
        }
    }
}

/// How classes and protected groups map onto the model heads for a method.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskLayout {
    pub method: MethodKind,
    pub n_classes: usize,
    /// Dataset attribute indices forming the domain label.
    pub domain_attrs: Vec<usize>,
    pub domain_sizes: Vec<usize>,
}

impl TaskLayout {
    pub fn new(ds: &Dataset, tcfg: &TrainConfig) -> Result<Self> {
        let method = tcfg.method;
        let domain_attrs: Vec<usize> = if tcfg.domain_attributes.is_empty() {
            (0..ds.attributes().len()).collect()
        } else {
            tcfg.domain_attributes
                .iter()
                .map(|name| {
                    ds.attribute_index(name)
                        .ok_or_else(|| Error::MissingGroupLabels(format!("dataset has no attribute {name:?}")))
                })
                .collect::<Result<_>>()?
        };
        if method.needs_group_labels() && domain_attrs.is_empty() {
            return Err(Error::MissingGroupLabels(format!(
                "method {method} needs protected-attribute labels but the dataset has none"
            )));
        }
        let domain_sizes = domain_attrs.iter().map(|&a| ds.attributes()[a].groups.len()).collect();
        Ok(Self { method, n_classes: ds.n_classes(), domain_attrs, domain_sizes })
    }

    pub fn n_domains(&self) -> usize {
        joint_group_count(&self.domain_sizes)
    }

    pub fn classifier_width(&self) -> usize {
        match self.method {
            MethodKind::DomainAware => self.n_classes * self.n_domains(),
            _ => self.n_classes,
        }
    }

    pub fn domain_head_width(&self) -> Option<usize> {
        match self.method {
            MethodKind::DomainUnaware => Some(self.n_domains()),
            _ => None,
        }
    }

    /// Fills in the dataset- and method-dependent widths of `base`.
    pub fn model_config(&self, input_dim: usize, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            input_dim,
            n_classes: self.classifier_width(),
            domain_classes: self.domain_head_width(),
            ..base.clone()
        }
    }

    /// Checks that a model config has exactly the head widths this method needs.
    pub fn check_model(&self, mcfg: &ModelConfig) -> Result<()> {
        if mcfg.n_classes != self.classifier_width() {
            return Err(Error::ConfigInvalid(format!(
                "method {} needs a classifier of width {}, model has {}",
                self.method,
                self.classifier_width(),
                mcfg.n_classes
            )));
        }
        if mcfg.domain_classes != self.domain_head_width() {
            return Err(Error::ConfigInvalid(format!(
                "method {} needs domain head {:?}, model has {:?}",
                self.method,
                self.domain_head_width(),
                mcfg.domain_classes
            )));
        }
        Ok(())
    }

    /// Joint domain index of every sample in `idx`.
    pub fn joint_groups(&self, ds: &Dataset, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                let s = &ds.samples()[i];
                let groups: Vec<Option<usize>> = self.domain_attrs.iter().map(|&a| s.groups[a]).collect();
                joint_group_index(&groups, &self.domain_sizes)
                    .ok_or_else(|| Error::MissingGroupLabels(format!("sample {} has an unknown group", s.id)))
            })
            .collect()
    }

    /// Maps a classifier output index back to a class.
    pub fn decode_prediction(&self, index: usize) -> Result<usize> {
        match self.method {
            MethodKind::DomainAware => Ok(domain_aware_decode(index, self.n_classes, self.n_domains())?.0),
            _ => Ok(index),
        }
    }
}

/// One mini-batch gathered from a dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Mat,
    pub au: Mat,
    pub labels: Vec<usize>,
    /// Joint domain index per sample, for methods that use group labels.
    pub domains: Option<Vec<usize>>,
}

impl Batch {
    pub fn gather(ds: &Dataset, idx: &[usize], layout: &TaskLayout) -> Result<Self> {
        let domains = if layout.method.needs_group_labels() { Some(layout.joint_groups(ds, idx)?) } else { None };
        Ok(Self { x: ds.features(idx), au: ds.au(idx), labels: ds.labels(idx), domains })
    }
}

/// Builds the method's objective from a forward pass.
pub fn assemble_loss(layout: &TaskLayout, acts: &Activations, batch: &Batch, sd_coefficient: f64) -> Result<LossOut> {
    let ce = || cross_entropy(&acts.logits, &batch.labels);
    let pos_match = || -> Result<LossOut> {
        match (&acts.h, &acts.a) {
            (Some(h), Some(a)) => combined_loss(&h.unit, &a.unit, &acts.logits, &batch.labels),
            _ => Err(Error::ConfigInvalid("positive matching needs embedding activations".into())),
        }
    };
    let domains = || {
        batch
            .domains
            .as_ref()
            .ok_or_else(|| Error::MissingGroupLabels(format!("batch has no group labels for {}", layout.method)))
    };
    match layout.method {
        MethodKind::CeBaseline => ce(),
        MethodKind::PosMatch => pos_match(),
        MethodKind::SpectralDecoupling => ce()?.plus(sd_penalty_with(&acts.logits, sd_coefficient)),
        MethodKind::SdPlusPosMatch => pos_match()?.plus(sd_penalty_with(&acts.logits, sd_coefficient)),
        MethodKind::DomainAware => {
            let labels = domain_aware_labels(&batch.labels, domains()?, layout.n_domains())?;
            cross_entropy(&acts.logits, &labels)
        }
        MethodKind::DomainUnaware => {
            let domain_logits = acts
                .domain_logits
                .as_ref()
                .ok_or_else(|| Error::ConfigInvalid("domain-unaware training needs a domain head".into()))?;
            let dom = cross_entropy(domain_logits, domains()?)?;
            ce()?.plus(LossOut { value: dom.value, d_domain: dom.d_logits, ..LossOut::default() })
        }
    }
}

/// Class predictions (decoded for domain-aware heads) for the given samples.
pub fn predict(params: &ModelParams, layout: &TaskLayout, ds: &Dataset, idx: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(1024) {
        let acts = forward_with(params, &ds.features(chunk), None)?;
        for row in acts.logits.iter_rows() {
            out.push(layout.decode_prediction(argmax(row))?);
        }
    }
    Ok(out)
}

pub fn accuracy_on(params: &ModelParams, layout: &TaskLayout, ds: &Dataset, split: Split) -> Result<f64> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::EmptyInput);
    }
    let preds = predict(params, layout, ds, &idx)?;
    let correct = preds.iter().zip(ds.labels(&idx)).filter(|(p, y)| **p == *y).count();
    Ok(correct as f64 / idx.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
}

/// Mutable state of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub velocity: ModelParams,
    pub epoch: usize,
    pub step: usize,
    pub best_val_acc: Option<f64>,
    pub best_params: ModelParams,
    pub history: History,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            velocity: params.zeros_like(),
            best_params: params.clone(),
            params,
            epoch: 0,
            step: 0,
            best_val_acc: None,
            history: History::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation accuracy.
    pub params: ModelParams,
    pub history: History,
    pub layout: TaskLayout,
}

pub fn train(ds: &Dataset, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(ds, mcfg, tcfg, &mut |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    ds: &Dataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let layout = TaskLayout::new(ds, tcfg)?;
    layout.check_model(mcfg)?;
    if mcfg.input_dim != ds.feature_dim() {
        return Err(Error::ConfigInvalid(format!(
            "model input_dim {} but dataset has {} features",
            mcfg.input_dim,
            ds.feature_dim()
        )));
    }
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() || ds.indices(Split::Val).is_empty() {
        return Err(Error::InvalidDataset("training needs non-empty train and val splits".into()));
    }
    if tcfg.method.needs_group_labels() {
        layout.joint_groups(ds, &train_idx)?;
    }

    let mut state = TrainState::new(init(mcfg)?);
    let with_embeddings = tcfg.method.uses_pos_match();
    for epoch in 0..tcfg.epochs {
        state.epoch = epoch;
        let lr = lr_at(epoch, tcfg);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for idx in batches(ds, Split::Train, tcfg.batch_size, tcfg.seed, epoch) {
            let step = state.step;
            let ctx = |e: Error| Error::Training { epoch, step, source: Box::new(e) };
            let batch = Batch::gather(ds, &idx, &layout)?;
            let acts = forward_with(&state.params, &batch.x, with_embeddings.then_some(&batch.au)).map_err(ctx)?;
            let sd = tcfg.sd_schedule.coefficient(tcfg.sd_lambda, step, tcfg.sd_anneal_steps);
            let loss = assemble_loss(&layout, &acts, &batch, sd).map_err(ctx)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, value: loss.value });
            }
            let up = Upstream {
                d_logits: loss.d_logits,
                d_h: loss.d_h,
                d_a: loss.d_a,
                d_domain: loss.d_domain,
                rev_lambda: tcfg.rev_lambda,
            };
            let grads = backward_with(&state.params, &acts, &up).map_err(ctx)?;
            sgd_step(&mut state.params, &mut state.velocity, &grads, lr, tcfg.momentum);
            if !state.params.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, value: f64::NAN });
            }
            loss_sum += loss.value;
            n_batches += 1;
            state.step += 1;
        }
        let val_acc = accuracy_on(&state.params, &layout, ds, Split::Val)?;
        // Strict improvement keeps the earliest best epoch.
        if state.best_val_acc.is_none_or(|best| val_acc > best) {
            state.best_val_acc = Some(val_acc);
            state.best_params = state.params.clone();
            state.history.best_epoch = Some(epoch);
            state.history.best_val_acc = Some(val_acc);
        }
        let record = EpochRecord { epoch, lr, train_loss: loss_sum / n_batches.max(1) as f64, val_acc };
        on_epoch(&record);
        state.history.epochs.push(record);
    }
    Ok(TrainOutcome { params: state.best_params, history: state.history, layout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GenConfig};
    use crate::model::init;
    use alloc::vec;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        for e in 0..10 {
            assert_eq!(lr_at(e, &cfg), 1e-3);
        }
        assert_eq!(lr_at(10, &cfg), 5e-4);
        assert_eq!(lr_at(19, &cfg), 5e-4);
        assert_eq!(lr_at(20, &cfg), 2.5e-4);
    }

    fn tiny_params() -> ModelParams {
        init(&ModelConfig {
            input_dim: 2,
            extractor_hidden: vec![],
            feat_dim: 2,
            n_classes: 2,
            h_dim: 2,
            au_proj_dim: 2,
            domain_classes: None,
            init_seed: 1,
        })
        .unwrap()
    }

    fn fill(p: &mut ModelParams, v: f64) {
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|x| *x = v);
        }
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut p = tiny_params();
        fill(&mut p, 0.0);
        let mut v = p.zeros_like();
        let mut g = p.zeros_like();
        fill(&mut g, 1.0);
        sgd_step(&mut p, &mut v, &g, 1.0, 0.9);
        sgd_step(&mut p, &mut v, &g, 1.0, 0.9);
        assert!(p.named_tensors().iter().all(|t| t.2.iter().all(|&x| (x + 2.9).abs() < 1e-15)));

        let mut q = tiny_params();
        let before = q.clone();
        let mut v = q.zeros_like();
        sgd_step(&mut q, &mut v, &g, 0.1, 0.0);
        for ((_, _, a), (_, _, b)) in q.named_tensors().iter().zip(before.named_tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, y - 0.1);
            }
        }
        let zero = q.zeros_like();
        let snapshot = q.clone();
        let mut v = q.zeros_like();
        sgd_step(&mut q, &mut v, &zero, 0.1, 0.9);
        assert_eq!(q, snapshot);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(θ) = ½ Σ c_k (θ_k − t_k)², gradient c_k (θ_k − t_k).
        let mut p = tiny_params();
        let mut v = p.zeros_like();
        let n = p.n_params();
        let target: Vec<f64> = (0..n).map(|k| k as f64 * 0.3 - 1.0).collect();
        let curv: Vec<f64> = (0..n).map(|k| 1.0 + (k % 2) as f64).collect();
        for _ in 0..2000 {
            let flat: Vec<f64> = p.named_tensors().iter().flat_map(|t| t.2.to_vec()).collect();
            let mut g = p.zeros_like();
            let mut k = 0;
            for t in g.tensors_mut() {
                for x in t.iter_mut() {
                    *x = curv[k] * (flat[k] - target[k]);
                    k += 1;
                }
            }
            sgd_step(&mut p, &mut v, &g, 0.2, 0.0);
        }
        let flat: Vec<f64> = p.named_tensors().iter().flat_map(|t| t.2.to_vec()).collect();
        for (x, t) in flat.iter().zip(&target) {
            assert!((x - t).abs() < 1e-9);
        }
    }

    fn small_data(seed: u64) -> Dataset {
        generate_synthetic(&GenConfig {
            n_samples: 240,
            n_classes: 3,
            feature_dim: 6,
            bias_strength: 1.0,
            feature_noise: 0.5,
            seed,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn small_model(layout: &TaskLayout, d: usize) -> ModelConfig {
        layout.model_config(
            d,
            &ModelConfig {
                extractor_hidden: vec![16],
                feat_dim: 16,
                h_dim: 16,
                au_proj_dim: 8,
                init_seed: 3,
                ..ModelConfig::default()
            },
        )
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let ds = small_data(1);
        let tcfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let layout = TaskLayout::new(&ds, &tcfg).unwrap();
        let mcfg = small_model(&layout, 6);
        let out = train(&ds, &mcfg, &tcfg).unwrap();
        assert_eq!(out.params, init(&mcfg).unwrap());
        assert!(out.history.epochs.is_empty());
    }

    #[test]
    fn every_method_trains_and_best_is_running_max() {
        let ds = small_data(2);
        for method in MethodKind::ALL {
            let tcfg =
                TrainConfig { method, epochs: 4, lr: 0.01, sd_anneal_steps: 10, seed: 5, ..TrainConfig::default() };
            let layout = TaskLayout::new(&ds, &tcfg).unwrap();
            let mcfg = small_model(&layout, 6);
            let out = train(&ds, &mcfg, &tcfg).unwrap();
            let accs: Vec<f64> = out.history.epochs.iter().map(|r| r.val_acc).collect();
            let best = accs.iter().copied().fold(f64::MIN, f64::max);
            assert_eq!(out.history.best_val_acc, Some(best));
            let first_best = accs.iter().position(|&a| a == best);
            assert_eq!(out.history.best_epoch, first_best);
            assert_eq!(accuracy_on(&out.params, &layout, &ds, Split::Val).unwrap(), best);
        }
    }

    #[test]
    fn mismatched_head_width_is_rejected() {
        let ds = small_data(3);
        let tcfg = TrainConfig { method: MethodKind::DomainAware, epochs: 1, ..TrainConfig::default() };
        let plain = TaskLayout::new(&ds, &TrainConfig::default()).unwrap();
        let mcfg = small_model(&plain, 6);
        assert!(matches!(train(&ds, &mcfg, &tcfg), Err(Error::ConfigInvalid(_))));
        let layout = TaskLayout::new(&ds, &tcfg).unwrap();
        assert_eq!(layout.classifier_width(), 6);
    }

    #[test]
    fn domain_methods_need_groups() {
        let ds = small_data(4);
        let mut samples = ds.samples().to_vec();
        samples[0].groups = alloc::vec![None];
        let ds_unknown =
            Dataset::new(samples, ds.class_names().to_vec(), ds.attributes().to_vec(), ds.splits().to_vec()).unwrap();
        let tcfg = TrainConfig { method: MethodKind::DomainUnaware, epochs: 1, ..TrainConfig::default() };
        let layout = TaskLayout::new(&ds_unknown, &tcfg).unwrap();
        let mcfg = small_model(&layout, 6);
        let train_has_unknown = ds_unknown.split_of(0) == Split::Train;
        let res = train(&ds_unknown, &mcfg, &tcfg);
        if train_has_unknown {
            assert!(matches!(res, Err(Error::MissingGroupLabels(_))));
        } else {
            assert!(res.is_ok());
        }
        let no_attrs = Dataset::new(
            ds.samples()
                .iter()
                .cloned()
                .map(|mut s| {
                    s.groups.clear();
                    s
                })
                .collect(),
            ds.class_names().to_vec(),
            alloc::vec![],
            ds.splits().to_vec(),
        )
        .unwrap();
        assert!(matches!(TaskLayout::new(&no_attrs, &tcfg), Err(Error::MissingGroupLabels(_))));
    }

    #[test]
    fn assemble_special_cases() {
        let ds = small_data(5);
        let idx: Vec<usize> = (0..ds.len()).collect();
        // Pick one sample per class so no positive pairs exist.
        let distinct: Vec<usize> =
            (0..3).map(|c| *idx.iter().find(|&&i| ds.samples()[i].label == c).unwrap()).collect();
        let ce_cfg = TrainConfig::default();
        let ce_layout = TaskLayout::new(&ds, &ce_cfg).unwrap();
        let p = init(&small_model(&ce_layout, 6)).unwrap();
        let batch = Batch::gather(&ds, &distinct, &ce_layout).unwrap();
        let acts = crate::model::forward(&p, &batch.x, &batch.au).unwrap();
        let ce = assemble_loss(&ce_layout, &acts, &batch, 0.0).unwrap().value;
        let pm_layout = TaskLayout { method: MethodKind::PosMatch, ..ce_layout.clone() };
        assert_eq!(assemble_loss(&pm_layout, &acts, &batch, 0.0).unwrap().value, ce);
        let sd_layout = TaskLayout { method: MethodKind::SpectralDecoupling, ..ce_layout.clone() };
        let coef = TrainConfig::default().sd_schedule.coefficient(2e-5, 0, 400);
        assert_eq!(assemble_loss(&sd_layout, &acts, &batch, coef).unwrap().value, ce);
    }
}
