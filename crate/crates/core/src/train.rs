//! Desk-scale training: dataset ingestion (IDX files and synthetic
//! class-conditional images), SGD with momentum and weight decay,
//! label-smoothed cross-entropy, a step learning-rate schedule, and
//! deterministic evaluation.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    backward, forward, forward_train, init_weights, Gradients, NetworkError, NetworkSpec,
    ParamClass, PrecisionAssignment, Weights,
};
use crate::seed::derive;
use crate::tensor::DenseTensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("invalid training config: {field}: {detail}")]
    BadConfig { field: String, detail: String },
    #[error("dataset split {split:?} is empty")]
    EmptySplit { split: Split },
    #[error("synthetic dataset supports 1..=8 classes, got {0}")]
    TooManyClasses(usize),
    #[error("synthetic images must be at least 6x6, got {h}x{w}")]
    ImageTooSmall { h: usize, w: usize },
    #[error("training diverged: loss became non-finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: failed to read: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x} at byte offset 0, expected 0x0000_08{{dims}}")]
    BadMagic { path: PathBuf, found: u32 },
    #[error("{path}: truncated at byte offset {offset}: wanted {wanted} more bytes")]
    Truncated {
        path: PathBuf,
        offset: usize,
        wanted: usize,
    },
    #[error("{path}: unsupported dimension count {ndim}, expected {expected}")]
    BadDims {
        path: PathBuf,
        ndim: usize,
        expected: &'static str,
    },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One split of labelled images. Image values are scaled to `[0, 1]` at
/// ingestion and then standardized per channel.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<DenseTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Train/val/test triple sharing one normalization (train statistics).
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DataBundle {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Test split when present, else the validation split. Final scores are
    /// read here so candidate selection (always on val) stays separate.
    pub fn report_split(&self) -> &Dataset {
        if self.test.is_empty() {
            &self.val
        } else {
            &self.test
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    RandomCrop,
    RandomHorizontalFlip,
}

/// Optimizer and schedule settings. Defaults follow the reference recipe:
/// SGD at lr 0.2 with momentum 0.9, weight decay 1e-3, label smoothing 0.01,
/// and a x0.1 step decay after 50% and 75% of the epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Fractions of the total epochs at which the learning rate decays.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub seed: u64,
    pub augmentations: Vec<Augmentation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 160,
            batch_size: 128,
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 1e-3,
            label_smoothing: 0.01,
            lr_milestones: vec![0.5, 0.75],
            lr_gamma: 0.1,
            seed: 0,
            augmentations: vec![Augmentation::RandomCrop, Augmentation::RandomHorizontalFlip],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &str, detail: String| TrainError::BadConfig {
            field: field.into(),
            detail,
        };
        if !(self.lr > 0.0) {
            return Err(bad("lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad(
                "momentum",
                format!("must be in [0, 1), got {}", self.momentum),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(bad(
                "label_smoothing",
                format!("must be in [0, 1), got {}", self.label_smoothing),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(bad(
                "weight_decay",
                format!("must be >= 0, got {}", self.weight_decay),
            ));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1".into()));
        }
        if !(self.lr_gamma > 0.0) {
            return Err(bad(
                "lr_gamma",
                format!("must be > 0, got {}", self.lr_gamma),
            ));
        }
        let mut prev = 0.0;
        for &m in &self.lr_milestones {
            if m <= prev || m >= 1.0 {
                return Err(bad(
                    "lr_milestones",
                    format!("must be strictly ascending in (0, 1), got {:?}", self.lr_milestones),
                ));
            }
            prev = m;
        }
        Ok(())
    }

    /// Right-continuous step schedule: the rate at `epoch` after applying
    /// every decay whose milestone epoch has been reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self
            .lr_milestones
            .iter()
            .filter(|&&m| (m * self.epochs as f64).floor() as usize <= epoch)
            .count();
        self.lr * self.lr_gamma.powi(decays as i32)
    }
}

/// Loss and top-1 accuracy on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Trained weights plus the validation result and the per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub val_result: EvalResult,
    pub epoch_rows: Vec<EpochRow>,
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Label-smoothed cross entropy, mean over the batch. Returns the loss and
/// the logit gradients (already scaled by 1/batch). At smoothing 0 this is
/// standard cross entropy.
pub fn cross_entropy_smoothed(
    logits: &DenseTensor,
    labels: &[usize],
    smoothing: f64,
) -> (f64, DenseTensor) {
    let [batch, classes] = logits.shape() else {
        panic!("logits must be [batch, classes]");
    };
    let (batch, classes) = (*batch, *classes);
    debug_assert_eq!(batch, labels.len());
    let mut grad = DenseTensor::zeros(vec![batch, classes]);
    let mut total = 0.0f64;
    let eps = smoothing;
    for b in 0..batch {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum_exp: f64 = row.iter().map(|&z| ((z as f64) - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let y = labels[b];
        let sum_z: f64 = row.iter().map(|&z| z as f64).sum();
        total += lse - (1.0 - eps) * row[y] as f64 - eps / classes as f64 * sum_z;
        for k in 0..classes {
            let p = ((row[k] as f64) - lse).exp();
            let q = eps / classes as f64 + if k == y { 1.0 - eps } else { 0.0 };
            grad.data_mut()[b * classes + k] = ((p - q) / batch as f64) as f32;
        }
    }
    (total / batch as f64, grad)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

const EVAL_CHUNK: usize = 64;

/// Mean objective and top-1 accuracy on a split; inference-mode batchnorm,
/// no weight mutation. Argmax ties resolve to the lowest class index.
pub fn evaluate_with_smoothing(
    net: &NetworkSpec,
    assignment: &PrecisionAssignment,
    weights: &Weights,
    data: &Dataset,
    smoothing: f64,
) -> Result<EvalResult, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit { split: data.split });
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for (images, labels) in data
        .images
        .chunks(EVAL_CHUNK)
        .zip(data.labels.chunks(EVAL_CHUNK))
    {
        let logits = forward(net, assignment, weights, images)?;
        let (loss, _) = cross_entropy_smoothed(&logits, labels, smoothing);
        loss_sum += loss * labels.len() as f64;
        let k = net.num_classes;
        for (b, &label) in labels.iter().enumerate() {
            let row = &logits.data()[b * k..(b + 1) * k];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(EvalResult {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// [`evaluate_with_smoothing`] at smoothing 0.
pub fn evaluate(
    net: &NetworkSpec,
    assignment: &PrecisionAssignment,
    weights: &Weights,
    data: &Dataset,
) -> Result<EvalResult, TrainError> {
    evaluate_with_smoothing(net, assignment, weights, data, 0.0)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

const CROP_PAD: usize = 2;

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Random crop out of a reflect-padded image (pad 2), preserving shape.
fn random_crop(img: &DenseTensor, dy: usize, dx: usize) -> DenseTensor {
    let (c, h, w) = img.rank3().expect("image");
    let mut out = DenseTensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect_index(y as isize + dy as isize - CROP_PAD as isize, h);
            for x in 0..w {
                let sx = reflect_index(x as isize + dx as isize - CROP_PAD as isize, w);
                out.data_mut()[(ch * h + y) * w + x] = img.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

fn horizontal_flip(img: &DenseTensor) -> DenseTensor {
    let (c, h, w) = img.rank3().expect("image");
    let mut out = DenseTensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(ch * h + y) * w + x] = img.data()[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

fn augment_sample(
    img: &DenseTensor,
    augmentations: &[Augmentation],
    rng: &mut ChaCha8Rng,
) -> DenseTensor {
    let mut out = img.clone();
    for aug in augmentations {
        match aug {
            Augmentation::RandomCrop => {
                let dy = rng.gen_range(0..=2 * CROP_PAD);
                let dx = rng.gen_range(0..=2 * CROP_PAD);
                out = random_crop(&out, dy, dx);
            }
            Augmentation::RandomHorizontalFlip => {
                if rng.gen::<bool>() {
                    out = horizontal_flip(&out);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// SGD with momentum on the full-precision latent weights; binarized layers
/// train through the straight-through estimator. Weight decay applies to
/// conv/linear weights only. Fully deterministic given the config seed.
pub fn train_model(
    net: &NetworkSpec,
    assignment: &PrecisionAssignment,
    data: &DataBundle,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit {
            split: Split::Train,
        });
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit { split: Split::Val });
    }
    let mut weights = init_weights(net, derive(cfg.seed, "init"));
    weights.validate(net)?;
    let mut velocity: Vec<DenseTensor> = weights
        .params()
        .iter()
        .map(|(t, _)| DenseTensor::zeros(t.shape().to_vec()))
        .collect();

    let mut epoch_rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch) as f32;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive(cfg.seed, &format!("shuffle.epoch{epoch}")));
        order.shuffle(&mut shuffle_rng);
        let mut aug_rng =
            ChaCha8Rng::seed_from_u64(derive(cfg.seed, &format!("augment.epoch{epoch}")));

        let mut loss_sum = 0.0f64;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<DenseTensor> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augmentations.is_empty() {
                        data.train.images[i].clone()
                    } else {
                        augment_sample(&data.train.images[i], &cfg.augmentations, &mut aug_rng)
                    }
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train.labels[i]).collect();

            let cache = forward_train(net, assignment, &mut weights, &images)?;
            let (loss, grad_logits) =
                cross_entropy_smoothed(&cache.logits, &labels, cfg.label_smoothing);
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_index,
                });
            }
            loss_sum += loss * labels.len() as f64;
            let grads = backward(net, assignment, &weights, &cache, &grad_logits)?;
            sgd_step(&mut weights, &grads, &mut velocity, cfg, lr);
        }

        let val = evaluate_with_smoothing(net, assignment, &weights, &data.val, cfg.label_smoothing)?;
        epoch_rows.push(EpochRow {
            epoch,
            lr: cfg.lr_at(epoch),
            train_loss: loss_sum / data.train.len() as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
        });
    }

    let val_result = match epoch_rows.last() {
        Some(row) => EvalResult {
            loss: row.val_loss,
            accuracy: row.val_acc,
        },
        None => evaluate_with_smoothing(net, assignment, &weights, &data.val, cfg.label_smoothing)?,
    };
    Ok(TrainOutcome {
        weights,
        val_result,
        epoch_rows,
    })
}

fn sgd_step(
    weights: &mut Weights,
    grads: &Gradients,
    velocity: &mut [DenseTensor],
    cfg: &TrainConfig,
    lr: f32,
) {
    let momentum = cfg.momentum as f32;
    let weight_decay = cfg.weight_decay as f32;
    let params = weights.params_mut();
    let grad_tensors = grads.params();
    debug_assert_eq!(params.len(), grad_tensors.len());
    debug_assert_eq!(params.len(), velocity.len());
    for (((param, class), grad), vel) in params
        .into_iter()
        .zip(grad_tensors)
        .zip(velocity.iter_mut())
    {
        let decay = if class == ParamClass::ConvLinearWeight {
            weight_decay
        } else {
            0.0
        };
        for ((p, &g), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(vel.data_mut().iter_mut())
        {
            let g = g + decay * *p;
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Rendering knobs for the synthetic class-conditional images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthStyle {
    /// Uniform pixel noise amplitude added before clamping to [0, 1].
    pub noise: f64,
    /// Maximum positional jitter (pixels) of the bar and blob.
    pub jitter: usize,
    pub bar_value: f64,
    pub blob_value: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        Self {
            noise: 0.3,
            jitter: 1,
            bar_value: 0.8,
            blob_value: 1.0,
        }
    }
}

/// Class semantics: bit 0 picks bar orientation (horizontal/vertical),
/// bit 1 the blob corner (top-left/bottom-right), bit 2 the bar offset
/// (near/far half). Classes are conjunctions, so separating all of them
/// takes spatially aware features, not just first-order statistics.
fn render_class(
    k: usize,
    shape: [usize; 3],
    style: &SynthStyle,
    rng: &mut ChaCha8Rng,
) -> DenseTensor {
    let [c, h, w] = shape;
    let mut img = DenseTensor::zeros(vec![c, h, w]);
    let jitter = |rng: &mut ChaCha8Rng| {
        if style.jitter == 0 {
            0isize
        } else {
            rng.gen_range(-(style.jitter as isize)..=style.jitter as isize)
        }
    };
    let horizontal = k % 2 == 0;
    let corner_tl = (k / 2) % 2 == 0;
    let near_half = (k / 4) % 2 == 0;

    // bar: two pixels thick, spanning the image
    let center = |n: usize| -> usize {
        if near_half {
            n / 3
        } else {
            2 * n / 3
        }
    };
    let bar = style.bar_value as f32;
    if horizontal {
        let r = (center(h) as isize + jitter(rng)).clamp(0, h as isize - 2) as usize;
        for y in r..(r + 2).min(h) {
            for x in 0..w {
                img.data_mut()[y * w + x] = bar;
            }
        }
    } else {
        let cx = (center(w) as isize + jitter(rng)).clamp(0, w as isize - 2) as usize;
        for y in 0..h {
            for x in cx..(cx + 2).min(w) {
                img.data_mut()[y * w + x] = bar;
            }
        }
    }

    // blob: 3x3 bump in one corner region
    let blob = style.blob_value as f32;
    let (by, bx) = if corner_tl {
        (1isize, 1isize)
    } else {
        (h as isize - 4, w as isize - 4)
    };
    let by = (by + jitter(rng)).clamp(0, h as isize - 3) as usize;
    let bx = (bx + jitter(rng)).clamp(0, w as isize - 3) as usize;
    for dy in 0..3 {
        for dx in 0..3 {
            let weight = if dy == 1 && dx == 1 { 1.0 } else { 0.6 };
            let v = &mut img.data_mut()[(by + dy) * w + (bx + dx)];
            *v = (*v + blob * weight).min(1.0);
        }
    }

    // noise everywhere, all channels; non-pattern channels carry only noise
    let amp = style.noise as f32;
    for v in img.data_mut().iter_mut() {
        *v = (*v + rng.gen_range(-amp..=amp)).clamp(0.0, 1.0);
    }
    img
}

fn channel_stats(images: &[DenseTensor], channels: usize) -> Vec<(f32, f32)> {
    let mut stats = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        for img in images {
            let (_, h, w) = img.rank3().expect("image");
            for &v in &img.data()[c * h * w..(c + 1) * h * w] {
                sum += v as f64;
                sum_sq += (v as f64) * (v as f64);
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = (sum_sq / count as f64 - mean * mean).max(1e-12);
        stats.push((mean as f32, var.sqrt() as f32));
    }
    stats
}

fn standardize(images: &mut [DenseTensor], stats: &[(f32, f32)]) {
    for img in images {
        let (c, h, w) = img.rank3().expect("image");
        for ch in 0..c {
            let (mean, std) = stats[ch];
            for v in &mut img.data_mut()[ch * h * w..(ch + 1) * h * w] {
                *v = (*v - mean) / std;
            }
        }
    }
}

/// Deterministic synthetic dataset: `per_class` images per class, rendered
/// from the class pattern plus noise, standardized per channel over the
/// generated set. Identical seeds give identical datasets.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<Dataset, TrainError> {
    synth_dataset_styled(
        num_classes,
        per_class,
        shape,
        seed,
        &SynthStyle::default(),
        Split::Train,
    )
}

pub fn synth_dataset_styled(
    num_classes: usize,
    per_class: usize,
    shape: [usize; 3],
    seed: u64,
    style: &SynthStyle,
    split: Split,
) -> Result<Dataset, TrainError> {
    if num_classes == 0 || num_classes > 8 {
        return Err(TrainError::TooManyClasses(num_classes));
    }
    if per_class == 0 {
        return Err(TrainError::EmptySplit { split });
    }
    if shape[1] < 6 || shape[2] < 6 {
        return Err(TrainError::ImageTooSmall {
            h: shape[1],
            w: shape[2],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, "synth"));
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for k in 0..num_classes {
        for _ in 0..per_class {
            images.push(render_class(k, shape, style, &mut rng));
            labels.push(k);
        }
    }
    let stats = channel_stats(&images, shape[0]);
    standardize(&mut images, &stats);
    Ok(Dataset {
        images,
        labels,
        num_classes,
        split,
    })
}

/// Train/val/test bundle of synthetic data. The splits draw from disjoint
/// derived seeds; validation and test are standardized with the training
/// statistics.
pub fn synth_bundle(
    num_classes: usize,
    per_class: [usize; 3],
    shape: [usize; 3],
    seed: u64,
    style: &SynthStyle,
) -> Result<DataBundle, TrainError> {
    let raw = |split: Split, tag: &str, count: usize| -> Result<(Vec<DenseTensor>, Vec<usize>), TrainError> {
        if count == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, tag));
        let mut images = Vec::with_capacity(num_classes * count);
        let mut labels = Vec::with_capacity(num_classes * count);
        for k in 0..num_classes {
            for _ in 0..count {
                images.push(render_class(k, shape, style, &mut rng));
                labels.push(k);
            }
        }
        let _ = split;
        Ok((images, labels))
    };
    if num_classes == 0 || num_classes > 8 {
        return Err(TrainError::TooManyClasses(num_classes));
    }
    if per_class[0] == 0 {
        return Err(TrainError::EmptySplit {
            split: Split::Train,
        });
    }
    if shape[1] < 6 || shape[2] < 6 {
        return Err(TrainError::ImageTooSmall {
            h: shape[1],
            w: shape[2],
        });
    }
    let (mut train_images, train_labels) = raw(Split::Train, "synth.train", per_class[0])?;
    let (mut val_images, val_labels) = raw(Split::Val, "synth.val", per_class[1])?;
    let (mut test_images, test_labels) = raw(Split::Test, "synth.test", per_class[2])?;
    let stats = channel_stats(&train_images, shape[0]);
    standardize(&mut train_images, &stats);
    standardize(&mut val_images, &stats);
    standardize(&mut test_images, &stats);
    Ok(DataBundle {
        train: Dataset {
            images: train_images,
            labels: train_labels,
            num_classes,
            split: Split::Train,
        },
        val: Dataset {
            images: val_images,
            labels: val_labels,
            num_classes,
            split: Split::Val,
        },
        test: Dataset {
            images: test_images,
            labels: test_labels,
            num_classes,
            split: Split::Test,
        },
    })
}

// ---------------------------------------------------------------------------
// IDX ingestion
// ---------------------------------------------------------------------------

const IDX_UBYTE: u8 = 0x08;

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, IdxError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            wanted: end - bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parses an IDX ubyte payload: magic `0x0000_08NN` (NN = dimension count),
/// big-endian u32 dims, raw bytes. Returns the dims and the payload slice.
pub(crate) fn parse_idx<'a>(bytes: &'a [u8], path: &Path) -> Result<(Vec<usize>, &'a [u8]), IdxError> {
    let magic = read_be_u32(bytes, 0, path)?;
    let [b0, b1, ty, ndim] = magic.to_be_bytes();
    if b0 != 0 || b1 != 0 || ty != IDX_UBYTE || ndim == 0 {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let ndim = ndim as usize;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        dims.push(read_be_u32(bytes, 4 + 4 * i, path)? as usize);
    }
    let header = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            wanted: expected - payload.len(),
        });
    }
    Ok((dims, &payload[..expected]))
}

fn load_idx_images(path: &Path) -> Result<Vec<DenseTensor>, IdxError> {
    let bytes = std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (dims, payload) = parse_idx(&bytes, path)?;
    let (n, c, h, w) = match dims[..] {
        [n, h, w] => (n, 1, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(IdxError::BadDims {
                path: path.to_path_buf(),
                ndim: dims.len(),
                expected: "3 ([N,H,W]) or 4 ([N,C,H,W])",
            })
        }
    };
    let per = c * h * w;
    Ok((0..n)
        .map(|i| {
            let data = payload[i * per..(i + 1) * per]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect();
            DenseTensor::new(vec![c, h, w], data).expect("idx image")
        })
        .collect())
}

fn load_idx_labels(path: &Path) -> Result<Vec<usize>, IdxError> {
    let bytes = std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (dims, payload) = parse_idx(&bytes, path)?;
    if dims.len() != 1 {
        return Err(IdxError::BadDims {
            path: path.to_path_buf(),
            ndim: dims.len(),
            expected: "1 ([N])",
        });
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// IDX ingestion source: train pair required, test pair optional, val split
/// carved out of train by a seeded shuffle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

/// Loads an IDX image/label pair (plus optional test pair) into a bundle:
/// pixels scaled to `[0, 1]`, a deterministic seeded train/val split, and
/// per-channel standardization from the training statistics.
pub fn load_idx(source: &IdxSource, seed: u64) -> Result<DataBundle, TrainError> {
    let images = load_idx_images(&source.train_images)?;
    let labels = load_idx_labels(&source.train_labels)?;
    if images.len() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        }
        .into());
    }
    if images.is_empty() {
        return Err(TrainError::EmptySplit {
            split: Split::Train,
        });
    }
    let (mut test_images, test_labels) = match (&source.test_images, &source.test_labels) {
        (Some(ti), Some(tl)) => {
            let imgs = load_idx_images(ti)?;
            let labs = load_idx_labels(tl)?;
            if imgs.len() != labs.len() {
                return Err(IdxError::CountMismatch {
                    images: imgs.len(),
                    labels: labs.len(),
                }
                .into());
            }
            (imgs, labs)
        }
        _ => (Vec::new(), Vec::new()),
    };

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, "split"));
    order.shuffle(&mut rng);
    let val_len = ((images.len() as f64 * source.val_fraction) as usize).min(images.len() - 1);
    let (val_idx, train_idx) = order.split_at(val_len);

    let channels = images[0].shape()[0];
    let mut train_images: Vec<DenseTensor> =
        train_idx.iter().map(|&i| images[i].clone()).collect();
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let mut val_images: Vec<DenseTensor> = val_idx.iter().map(|&i| images[i].clone()).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let stats = channel_stats(&train_images, channels);
    standardize(&mut train_images, &stats);
    standardize(&mut val_images, &stats);
    standardize(&mut test_images, &stats);

    let num_classes = train_labels
        .iter()
        .chain(&val_labels)
        .chain(&test_labels)
        .copied()
        .max()
        .unwrap_or(0)
        + 1;
    Ok(DataBundle {
        train: Dataset {
            images: train_images,
            labels: train_labels,
            num_classes,
            split: Split::Train,
        },
        val: Dataset {
            images: val_images,
            labels: val_labels,
            num_classes,
            split: Split::Val,
        },
        test: Dataset {
            images: test_images,
            labels: test_labels,
            num_classes,
            split: Split::Test,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::ActivationKind;
    use crate::network::{LayerSpec, NetworkSpec};

    fn tiny_net(num_classes: usize) -> NetworkSpec {
        let stem = LayerSpec::conv(0, 1, 4, (3, 3), 1, 1, true, ActivationKind::BinReLU);
        let hidden = vec![
            LayerSpec::conv(1, 4, 6, (3, 3), 1, 0, true, ActivationKind::BinReLU),
            LayerSpec::conv(2, 6, 6, (3, 3), 1, 0, true, ActivationKind::BinReLU),
        ];
        NetworkSpec::build([1, 8, 8], num_classes, stem, hidden).unwrap()
    }

    fn tiny_bundle(seed: u64) -> DataBundle {
        synth_bundle(2, [16, 8, 8], [1, 8, 8], seed, &SynthStyle::default()).unwrap()
    }

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr: 0.05,
            seed,
            augmentations: vec![],
            ..TrainConfig::default()
        }
    }

    // -- IDX ---------------------------------------------------------------

    fn idx_image_bytes(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
        let mut bytes = vec![0, 0, 0x08, 3];
        bytes.extend((n as u32).to_be_bytes());
        bytes.extend((h as u32).to_be_bytes());
        bytes.extend((w as u32).to_be_bytes());
        bytes.extend_from_slice(pixels);
        bytes
    }

    fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut bytes = vec![0, 0, 0x08, 1];
        bytes.extend((labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        bytes
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| (i % 251) as u8).collect();
        let img_path = dir.path().join("imgs.idx3-ubyte");
        let lab_path = dir.path().join("labels.idx1-ubyte");
        std::fs::write(&img_path, idx_image_bytes(2, 28, 28, &pixels)).unwrap();
        std::fs::write(&lab_path, idx_label_bytes(&[1, 0])).unwrap();

        let source = IdxSource {
            train_images: img_path,
            train_labels: lab_path,
            test_images: None,
            test_labels: None,
            val_fraction: 0.5,
        };
        let bundle = load_idx(&source, 1).unwrap();
        assert_eq!(bundle.train.len() + bundle.val.len(), 2);
        assert_eq!(bundle.train.images[0].shape(), &[1, 28, 28]);
        assert_eq!(bundle.train.num_classes, 2);
    }

    #[test]
    fn idx_bad_magic() {
        let path = Path::new("bad.idx");
        let bytes = vec![0, 1, 0x08, 3, 0, 0, 0, 0];
        assert!(matches!(
            parse_idx(&bytes, path),
            Err(IdxError::BadMagic { .. })
        ));
    }

    #[test]
    fn idx_truncated_names_offset() {
        let path = Path::new("short.idx");
        let mut bytes = idx_image_bytes(2, 4, 4, &[0u8; 32]);
        bytes.truncate(20);
        let err = parse_idx(&bytes, path).unwrap_err();
        match err {
            IdxError::Truncated { offset, wanted, .. } => {
                assert_eq!(offset, 20);
                assert_eq!(wanted, 28);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lab_path = dir.path().join("labels");
        std::fs::write(&img_path, idx_image_bytes(2, 4, 4, &[0u8; 32])).unwrap();
        std::fs::write(&lab_path, idx_label_bytes(&[0, 1, 1])).unwrap();
        let source = IdxSource {
            train_images: img_path,
            train_labels: lab_path,
            test_images: None,
            test_labels: None,
            val_fraction: 0.25,
        };
        assert!(matches!(
            load_idx(&source, 0),
            Err(TrainError::Idx(IdxError::CountMismatch { images: 2, labels: 3 }))
        ));
    }

    // -- synthetic data ------------------------------------------------------

    #[test]
    fn synth_deterministic() {
        let a = synth_dataset(4, 5, [1, 10, 10], 9).unwrap();
        let b = synth_dataset(4, 5, [1, 10, 10], 9).unwrap();
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x, y);
        }
        let c = synth_dataset(4, 5, [1, 10, 10], 10).unwrap();
        assert!(a.images.iter().zip(&c.images).any(|(x, y)| x != y));
    }

    #[test]
    fn synth_rejects_empty_and_oversized() {
        assert!(matches!(
            synth_dataset(4, 0, [1, 10, 10], 0),
            Err(TrainError::EmptySplit { .. })
        ));
        assert!(matches!(
            synth_dataset(9, 5, [1, 10, 10], 0),
            Err(TrainError::TooManyClasses(9))
        ));
        assert!(matches!(
            synth_dataset(2, 5, [1, 4, 4], 0),
            Err(TrainError::ImageTooSmall { .. })
        ));
    }

    // -- config / schedule ----------------------------------------------------

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.lr = -1.0;
        assert!(matches!(
            cfg.validate(),
            Err(TrainError::BadConfig { field, .. }) if field == "lr"
        ));
        let mut cfg = TrainConfig::default();
        cfg.lr_milestones = vec![0.75, 0.5];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lr_schedule_counts_decays() {
        let cfg = TrainConfig {
            epochs: 8,
            lr: 0.2,
            lr_milestones: vec![0.5, 0.75],
            lr_gamma: 0.1,
            ..TrainConfig::default()
        };
        let rates: Vec<f64> = (0..8).map(|e| cfg.lr_at(e)).collect();
        // milestones at floor(0.5*8)=4 and floor(0.75*8)=6
        assert_eq!(rates[..4], [0.2; 4]);
        assert!((rates[4] - 0.02).abs() < 1e-12);
        assert!((rates[5] - 0.02).abs() < 1e-12);
        assert!((rates[6] - 0.002).abs() < 1e-12);
        let decays = rates.windows(2).filter(|w| w[1] < w[0]).count();
        assert_eq!(decays, 2);
    }

    // -- loss -------------------------------------------------------------

    #[test]
    fn smoothing_zero_is_plain_cross_entropy() {
        let logits = DenseTensor::new(vec![2, 3], vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]).unwrap();
        let labels = [2usize, 0];
        let (smoothed, _) = cross_entropy_smoothed(&logits, &labels, 0.0);
        // independent plain cross entropy
        let mut expect = 0.0f64;
        for (b, &y) in labels.iter().enumerate() {
            let row = &logits.data()[b * 3..(b + 1) * 3];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&z| ((z as f64) - max).exp()).sum::<f64>().ln();
            expect += lse - row[y] as f64;
        }
        expect /= 2.0;
        assert!((smoothed - expect).abs() < 1e-6);
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = DenseTensor::zeros(vec![4, 5]);
        let labels = [0usize, 1, 2, 3];
        let (loss, _) = cross_entropy_smoothed(&logits, &labels, 0.0);
        assert!((loss - (5.0f64).ln()).abs() < 1e-5);
    }

    // -- eval ---------------------------------------------------------------

    #[test]
    fn evaluate_uniform_head_gives_ln_k_loss() {
        let net = tiny_net(3);
        let mut weights = init_weights(&net, 0);
        // zero head weight and bias force uniform logits
        for v in weights.head.weight.data_mut() {
            *v = 0.0;
        }
        let bundle = synth_bundle(3, [4, 4, 4], [1, 8, 8], 3, &SynthStyle::default()).unwrap();
        let result = evaluate(&net, &PrecisionAssignment::empty(), &weights, &bundle.val).unwrap();
        assert!((result.loss - (3.0f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn evaluate_is_pure() {
        let net = tiny_net(2);
        let weights = init_weights(&net, 1);
        let bundle = tiny_bundle(4);
        let a = evaluate(&net, &PrecisionAssignment::empty(), &weights, &bundle.val).unwrap();
        let b = evaluate(&net, &PrecisionAssignment::empty(), &weights, &bundle.val).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_rejects_empty_split() {
        let net = tiny_net(2);
        let weights = init_weights(&net, 1);
        let empty = Dataset {
            images: vec![],
            labels: vec![],
            num_classes: 2,
            split: Split::Test,
        };
        assert!(matches!(
            evaluate(&net, &PrecisionAssignment::empty(), &weights, &empty),
            Err(TrainError::EmptySplit { split: Split::Test })
        ));
    }

    // -- training ------------------------------------------------------------

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let net = tiny_net(2);
        let bundle = tiny_bundle(5);
        let cfg = quick_cfg(0, 11);
        let outcome = train_model(&net, &PrecisionAssignment::empty(), &bundle, &cfg).unwrap();
        assert_eq!(outcome.weights, init_weights(&net, derive(11, "init")));
        assert!(outcome.epoch_rows.is_empty());
        assert!((0.0..=1.0).contains(&outcome.val_result.accuracy));
    }

    #[test]
    fn training_is_bit_deterministic() {
        let net = tiny_net(2);
        let bundle = tiny_bundle(6);
        let cfg = TrainConfig {
            augmentations: vec![Augmentation::RandomCrop, Augmentation::RandomHorizontalFlip],
            ..quick_cfg(2, 13)
        };
        let a = train_model(&net, &PrecisionAssignment::empty(), &bundle, &cfg).unwrap();
        let b = train_model(&net, &PrecisionAssignment::empty(), &bundle, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.val_result.loss.to_bits(), b.val_result.loss.to_bits());
        assert_eq!(a.epoch_rows, b.epoch_rows);
    }

    #[test]
    fn separable_toy_data_reaches_high_accuracy() {
        // two classes, high contrast, no noise: trivially separable
        let style = SynthStyle {
            noise: 0.05,
            ..SynthStyle::default()
        };
        let bundle = synth_bundle(2, [32, 16, 16], [1, 8, 8], 21, &style).unwrap();
        let net = tiny_net(2);
        let cfg = TrainConfig {
            epochs: 8,
            lr: 0.05,
            ..quick_cfg(8, 3)
        };
        let outcome = train_model(&net, &PrecisionAssignment::empty(), &bundle, &cfg).unwrap();
        assert!(
            outcome.val_result.accuracy >= 0.99,
            "val accuracy {}",
            outcome.val_result.accuracy
        );
    }

    #[test]
    fn binarized_layer_trains_with_ste() {
        // single binarized hidden layer on separable data: loss must drop
        let style = SynthStyle {
            noise: 0.05,
            ..SynthStyle::default()
        };
        let bundle = synth_bundle(2, [32, 16, 16], [1, 8, 8], 22, &style).unwrap();
        let net = tiny_net(2);
        let assignment = PrecisionAssignment::from_indices([1], &net).unwrap();
        let cfg = quick_cfg(6, 5);
        let outcome = train_model(&net, &assignment, &bundle, &cfg).unwrap();
        let first = outcome.epoch_rows.first().unwrap().train_loss;
        let last = outcome.epoch_rows.last().unwrap().train_loss;
        assert!(
            last < first,
            "loss did not decrease: {first} -> {last}"
        );
        assert!(outcome.val_result.accuracy > 0.8);
    }

    #[test]
    fn augmentations_preserve_shape_and_determinism() {
        let img = synth_dataset(2, 1, [1, 8, 8], 1).unwrap().images[0].clone();
        let mut rng1 = ChaCha8Rng::seed_from_u64(3);
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let augs = [Augmentation::RandomCrop, Augmentation::RandomHorizontalFlip];
        let a = augment_sample(&img, &augs, &mut rng1);
        let b = augment_sample(&img, &augs, &mut rng2);
        assert_eq!(a, b);
        assert_eq!(a.shape(), img.shape());
    }
}
