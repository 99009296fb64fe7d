//! Optimizer, learning-rate policies, checkpoints and the supervised training loop.

mod checkpoint;
mod schedule;
mod sgd;

pub use checkpoint::{
    load_checkpoint, load_model, restore_state, save_checkpoint, state_checkpoint, Checkpoint, ModelKind,
    FORMAT_VERSION, MAGIC,
};
pub use schedule::{poly_lr, step_lr, LrPolicy};
pub use sgd::{Sgd, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Classifier, NetworkSpec, INPUT_MULTIPLE};
use crate::data::{augment_classification, augment_segmentation, AugmentConfig, Dataset, Sample, Target, IGNORE};
use crate::error::{invalid, Error, Result};
use crate::nn::cross_entropy_ignore;
use crate::seg_head::SegNet;
use crate::tensor::{ops, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_policy: LrPolicy,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight of each per-scale loss when the network has auxiliary supervision enabled.
    pub aux_weight: f64,
    pub log_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            epochs: 300,
            lr0: 0.01,
            lr_policy: LrPolicy::default(),
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
            aux_weight: 0.4,
            log_every: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Step schedule from 0.1 with drops at epochs 30, 60 and 90.
    pub fn classification() -> Self {
        Self { batch_size: 256, epochs: 120, lr0: 0.1, lr_policy: LrPolicy::classification_default(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid!("initial learning rate must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(invalid!("momentum must be in [0, 1) and weight decay non-negative"));
        }
        if self.log_every == 0 {
            return Err(invalid!("log interval must be at least 1"));
        }
        self.lr_policy.validate()?;
        self.augment.validate()
    }

    pub fn iterations_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// A network the training loop can optimize and persist.
pub trait NetModel: Sized {
    const KIND: ModelKind;

    fn build(spec: &NetworkSpec, seed: u64) -> Result<Self>;
    fn spec(&self) -> &NetworkSpec;
    fn store(&self) -> &ParamStore<f32>;
    fn store_mut(&mut self) -> &mut ParamStore<f32>;
    /// Checks that every sample carries the matching target type and a usable size.
    fn check_dataset(&self, ds: &Dataset, cfg: &TrainConfig) -> Result<()>;
    fn augment(&self, s: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample;
    /// Training-mode loss for one batch, or `None` when no pixel carries a label.
    fn batch_loss(&mut self, tape: &mut Tape<f32>, images: Var, batch: &[Sample], aux_weight: f64) -> Result<Option<Var>>;
}

fn check_kind(ds: &Dataset, want: fn(&Target) -> bool, what: &str) -> Result<()> {
    match ds.iter().find(|s| !want(&s.target)) {
        Some(s) => Err(Error::Dataset(format!("sample {} has no {what} target", s.id))),
        None => Ok(()),
    }
}

fn check_classes(spec: &NetworkSpec, ds: &Dataset) -> Result<()> {
    if spec.num_classes != ds.num_classes {
        return Err(Error::Dataset(format!(
            "model predicts {} classes but the dataset has {}",
            spec.num_classes, ds.num_classes
        )));
    }
    Ok(())
}

fn check_crop(crop: usize) -> Result<()> {
    if !crop.is_multiple_of(INPUT_MULTIPLE) {
        return Err(invalid!("crop {crop} is not divisible by {INPUT_MULTIPLE}"));
    }
    Ok(())
}

impl NetModel for SegNet<f32> {
    const KIND: ModelKind = ModelKind::Segmentation;

    fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        SegNet::build(spec, seed)
    }

    fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn check_dataset(&self, ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
        check_classes(&self.spec, ds)?;
        check_kind(ds, |t| matches!(t, Target::Segmentation(_)), "segmentation")?;
        check_crop(cfg.augment.crop)
    }

    fn augment(&self, s: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
        augment_segmentation(s, cfg, seed)
    }

    fn batch_loss(&mut self, tape: &mut Tape<f32>, images: Var, batch: &[Sample], aux_weight: f64) -> Result<Option<Var>> {
        let labels: Vec<u8> = batch.iter().flat_map(|s| s.label().expect("checked").data().iter().copied()).collect();
        if labels.iter().all(|&l| l == IGNORE) {
            return Ok(None);
        }
        let out = self.forward_train(tape, images)?;
        let mut loss = cross_entropy_ignore(tape, out.final_logits, &labels, IGNORE)?;
        if self.spec.aux_supervision {
            for &logits in &out.scale_logits {
                let (h, w) = (tape.shape(logits)[2], tape.shape(logits)[3]);
                let small: Vec<u8> = batch
                    .iter()
                    .flat_map(|s| s.label().expect("checked").resize_nearest(h, w).into_vec())
                    .collect();
                if small.iter().all(|&l| l == IGNORE) {
                    continue;
                }
                let aux = cross_entropy_ignore(tape, logits, &small, IGNORE)?;
                let aux = ops::scale(tape, aux, aux_weight as f32);
                loss = ops::add(tape, loss, aux)?;
            }
        }
        Ok(Some(loss))
    }
}

impl NetModel for Classifier<f32> {
    const KIND: ModelKind = ModelKind::Classification;

    fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        Classifier::build(spec, seed)
    }

    fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn check_dataset(&self, ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
        check_classes(&self.spec, ds)?;
        if ds.num_classes > IGNORE as usize {
            return Err(invalid!("training supports at most 255 classes"));
        }
        check_kind(ds, |t| matches!(t, Target::Class(_)), "class")?;
        check_crop(cfg.augment.cls_crop)
    }

    fn augment(&self, s: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
        augment_classification(s, cfg, seed)
    }

    fn batch_loss(&mut self, tape: &mut Tape<f32>, images: Var, batch: &[Sample], _aux_weight: f64) -> Result<Option<Var>> {
        let labels: Vec<u8> = batch
            .iter()
            .map(|s| match s.target {
                Target::Class(c) => c,
                _ => unreachable!("checked"),
            })
            .collect();
        let logits = self.forward_train(tape, images)?;
        Ok(Some(cross_entropy_ignore(tape, logits, &labels, IGNORE)?))
    }
}

/// Model plus optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct TrainState<M> {
    pub model: M,
    pub optimizer: Sgd<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: usize,
}

impl<M: NetModel> TrainState<M> {
    pub fn new(model: M, momentum: f64, weight_decay: f64) -> Self {
        let optimizer = Sgd::new(model.store(), momentum, weight_decay);
        Self { model, optimizer, epoch: 0, iteration: 0 }
    }

    pub fn from_config(model: M, cfg: &TrainConfig) -> Self {
        Self::new(model, cfg.momentum, cfg.weight_decay)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub steps: usize,
    /// Batches without a single labelled pixel; they advance the schedule without an update.
    pub skipped: usize,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iter,lr,loss")?;
        for r in &self.losses {
            writeln!(f, "{},{},{}", r.iter, r.lr, r.loss)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Seed mixing for per-epoch and per-sample randomness.
pub(crate) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x6a09_e667_f3bc_c908;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
    order
}

fn stack_images(batch: &[Sample]) -> Result<Tensor<f32>> {
    let shape = batch[0].image.shape().to_vec();
    if let Some(s) = batch.iter().find(|s| s.image.shape() != shape.as_slice()) {
        return Err(Error::Dataset(format!("sample {} is {:?}, batch expects {shape:?}", s.id, s.image.shape())));
    }
    let mut data = Vec::with_capacity(batch.len() * batch[0].image.numel());
    for s in batch {
        data.extend_from_slice(s.image.data());
    }
    Tensor::from_vec(&[batch.len(), shape[0], shape[1], shape[2]], data)
}

/// Trains from `state.epoch` up to `cfg.epochs`.
pub fn train<M: NetModel>(state: &mut TrainState<M>, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(state, ds, cfg, |_, _| Ok(true))
}

/// [`train`] with a callback after every epoch; returning `false` stops early.
pub fn train_with<M, F>(state: &mut TrainState<M>, ds: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainReport>
where
    M: NetModel,
    F: FnMut(&TrainState<M>, &TrainReport) -> Result<bool>,
{
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    state.model.check_dataset(ds, cfg)?;
    let per_epoch = cfg.iterations_per_epoch(ds.len());
    let total = cfg.epochs * per_epoch;
    let mut report = TrainReport::default();
    while state.epoch < cfg.epochs {
        let order = epoch_order(cfg.seed, state.epoch, ds.len());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let pos = (b * cfg.batch_size + j) as u64;
                    state.model.augment(ds.get(i), &cfg.augment, derive_seed(cfg.seed, &[state.epoch as u64, pos]))
                })
                .collect();
            let lr = cfg.lr_policy.lr(cfg.lr0, state.epoch, state.iteration, total)?;
            let mut tape = Tape::new();
            let images = tape.constant(&stack_images(&batch)?);
            match state.model.batch_loss(&mut tape, images, &batch, cfg.aux_weight)? {
                Some(loss) => {
                    let value = tape.value(loss)[0] as f64;
                    if !value.is_finite() {
                        return Err(Error::Numerical(format!(
                            "loss became {value} at iteration {}",
                            state.iteration
                        )));
                    }
                    tape.backward(loss)?;
                    let store = state.model.store_mut();
                    tape.write_param_grads(store)?;
                    state.optimizer.step(store, lr)?;
                    store.zero_grad();
                    report.steps += 1;
                    if state.iteration.is_multiple_of(cfg.log_every) {
                        report.losses.push(LossRecord { iter: state.iteration, lr, loss: value });
                    }
                }
                None => report.skipped += 1,
            }
            state.iteration += 1;
        }
        state.epoch += 1;
        if !on_epoch(state, &report)? {
            break;
        }
    }
    Ok(report)
}
