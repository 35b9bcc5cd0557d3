//! Stratified splitting, minibatch training and frozen-layer fine-tuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{self, AudioClip, AudioError, ClassLabel, LabeledExample, Split};
use crate::cnn::{self, AdamHyper, AdamState, CnnError, Model};
use crate::features::{self, FeatureError};
use crate::rng::{derive_seed, SplitMix64};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("examples mix channel counts ({0} and {1})")]
    MixedChannels(usize, usize),
    #[error("class {class} has {count} example(s); at least 2 are needed to split")]
    ClassTooSmall { class: ClassLabel, count: usize },
    #[error("freeze mask has {actual} entries, model has {expected} parameterized layers")]
    MaskLengthMismatch { expected: usize, actual: usize },
    #[error("model expects {model} channel(s) but features have {features}")]
    ChannelMismatch { model: usize, features: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub colored: bool,
    /// Stop after this many epochs without a new best validation loss.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, lr: 1e-3, seed: 42, colored: false, early_stop_patience: 5 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        if self.colored {
            3
        } else {
            1
        }
    }
}

/// One flag per parameterized layer; `true` freezes that layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask(pub Vec<bool>);

impl FreezeMask {
    /// Freeze the three conv layers, retrain both dense layers.
    pub fn freeze_conv() -> Self {
        Self(vec![true, true, true, false, false])
    }

    pub fn uniform(len: usize, frozen: bool) -> Self {
        Self(vec![frozen; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Serializes as `{"epochs": [...], "best_epoch": n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl History {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }
}

#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub clip: AudioClip,
    pub label: ClassLabel,
}

/// A precomputed network input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExample {
    pub input: Vec<f32>,
    pub channels: usize,
    pub label: ClassLabel,
}

pub fn load_clips(examples: &[LabeledExample]) -> Result<Vec<LabeledClip>, TrainError> {
    examples
        .iter()
        .map(|e| Ok(LabeledClip { clip: audio_io::read_wav(&e.clip_path)?, label: e.label }))
        .collect()
}

pub fn featurize(clips: &[LabeledClip], colored: bool) -> Result<Vec<FeatureExample>, TrainError> {
    clips
        .iter()
        .map(|c| {
            let img = features::clip_features(&c.clip, colored, None)?;
            Ok(FeatureExample {
                input: img.pixels().expect("rendered").iter().map(|&v| v as f32).collect(),
                channels: img.channels(),
                label: c.label,
            })
        })
        .collect()
}

/// Per class: seeded shuffle, then `round(fraction·n)` to train. Entries
/// with an explicit split keep it. Both outputs keep input order.
pub fn stratified_split<T: Clone>(
    examples: &[T],
    label_of: impl Fn(&T) -> (ClassLabel, Option<Split>),
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), TrainError> {
    let mut is_train = vec![false; examples.len()];
    let mut by_class: BTreeMap<ClassLabel, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        match label_of(e) {
            (_, Some(split)) => is_train[i] = split == Split::Train,
            (label, None) => by_class.entry(label).or_default().push(i),
        }
    }
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(TrainError::ClassTooSmall { class, count: idx.len() });
        }
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        SplitMix64::new(derive_seed(seed, class.index() as u64)).shuffle(&mut idx);
        for &i in &idx[..n_train.min(idx.len())] {
            is_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (e, t) in examples.iter().zip(is_train) {
        if t { train.push(e.clone()) } else { test.push(e.clone()) }
    }
    Ok((train, test))
}

/// Convenience for manifests.
pub fn split_examples(
    examples: &[LabeledExample],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>), TrainError> {
    stratified_split(examples, |e| (e.label, e.split), train_fraction, seed)
}

/// Mean loss, accuracy and predicted classes.
pub fn evaluate(model: &Model, set: &[FeatureExample]) -> Result<(f64, f64, Vec<usize>), TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(set.len());
    for ex in set {
        let logits = model.logits(&ex.input)?;
        loss += cnn::loss_and_grad(&logits, ex.label.index()).0 as f64;
        preds.push(cnn::argmax(&logits));
    }
    let correct = preds.iter().zip(set).filter(|(p, e)| **p == e.label.index()).count();
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64, preds))
}

fn check_channels(sets: &[&[FeatureExample]]) -> Result<usize, TrainError> {
    let mut it = sets.iter().flat_map(|s| s.iter());
    let first = it.next().map(|e| e.channels).unwrap_or(0);
    for e in it {
        if e.channels != first {
            return Err(TrainError::MixedChannels(first, e.channels));
        }
    }
    Ok(first)
}

fn fit(
    mut model: Model,
    mask: Option<&FreezeMask>,
    train: &[FeatureExample],
    test: &[FeatureExample],
    cfg: &TrainConfig,
) -> Result<(Model, History), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if test.is_empty() {
        return Err(TrainError::EmptySet("test"));
    }
    let channels = check_channels(&[train, test])?;
    if channels != model.input_shape().channels {
        return Err(TrainError::ChannelMismatch { model: model.input_shape().channels, features: channels });
    }
    let hyper = AdamHyper { lr: cfg.lr, ..AdamHyper::default() };
    let mut adam = AdamState::new(&model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History { epochs: Vec::new(), best_epoch: 0 };
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        SplitMix64::new(derive_seed(cfg.seed, epoch as u64)).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut members = batch.to_vec();
            // Fixed summation order, whatever the shuffle produced.
            members.sort_unstable();
            let mut grads = model.zero_grads();
            for &i in &members {
                let ex = &train[i];
                let (logits, cache) = model.forward(&ex.input)?;
                let (loss, dlogits) = cnn::loss_and_grad(&logits, ex.label.index());
                loss_sum += loss as f64;
                model.backward_into(&cache, &dlogits, &mut grads);
            }
            cnn::scale(&mut grads, 1.0 / members.len() as f32);
            if let Some(mask) = mask {
                for (g, &frozen) in grads.iter_mut().zip(&mask.0) {
                    if frozen {
                        g.weight.data.iter_mut().for_each(|v| *v = 0.0);
                        g.bias.data.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            adam.step(&mut model, &grads, &hyper);
        }
        let (val_loss, val_acc, _) = evaluate(&model, test)?;
        let train_loss = loss_sum / train.len() as f64;
        log::info!("epoch {epoch}: train_loss {train_loss:.4} val_loss {val_loss:.4} val_acc {val_acc:.3}");
        history.epochs.push(EpochStats { train_loss, val_loss, val_acc });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                log::info!("early stop after epoch {epoch}; best epoch {}", history.best_epoch);
                break;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}

/// Trains a fresh model on precomputed features.
pub fn train_features(
    train: &[FeatureExample],
    test: &[FeatureExample],
    cfg: &TrainConfig,
) -> Result<(Model, History), TrainError> {
    let model = Model::init_canonical(check_channels(&[train, test])?.max(1), cfg.seed)?;
    fit(model, None, train, test, cfg)
}

/// Computes features once per clip, then trains a fresh model.
pub fn train(
    train: &[LabeledClip],
    test: &[LabeledClip],
    cfg: &TrainConfig,
) -> Result<(Model, History), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if test.is_empty() {
        return Err(TrainError::EmptySet("test"));
    }
    let tr = featurize(train, cfg.colored)?;
    let te = featurize(test, cfg.colored)?;
    train_features(&tr, &te, cfg)
}

/// Warm-started training with frozen layers receiving zero gradient.
pub fn finetune_features(
    base: &Model,
    mask: &FreezeMask,
    train: &[FeatureExample],
    test: &[FeatureExample],
    cfg: &TrainConfig,
) -> Result<(Model, History), TrainError> {
    let expected = base.architecture().param_layer_count();
    if mask.len() != expected {
        return Err(TrainError::MaskLengthMismatch { expected, actual: mask.len() });
    }
    fit(base.clone(), Some(mask), train, test, cfg)
}

pub fn finetune(
    base: &Model,
    mask: &FreezeMask,
    train: &[LabeledClip],
    test: &[LabeledClip],
    cfg: &TrainConfig,
) -> Result<(Model, History), TrainError> {
    let expected = base.architecture().param_layer_count();
    if mask.len() != expected {
        return Err(TrainError::MaskLengthMismatch { expected, actual: mask.len() });
    }
    let colored = base.input_shape().channels == 3;
    let tr = featurize(train, colored)?;
    let te = featurize(test, colored)?;
    finetune_features(base, mask, &tr, &te, cfg)
}
