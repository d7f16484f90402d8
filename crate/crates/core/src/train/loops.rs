//! Training and evaluation loops for the induction-head and MNIST tasks.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CoffeeError, Result};
use crate::numerics::{Matrix, RngState};
use crate::pipeline::{EmbeddingTable, PredictionTarget, Vocab};
use crate::ssm::{ModelKind, SsmLayer};
use crate::tasks::ih::{gen_ih_batch, IHConfig, IHSample};
use crate::tasks::ih0::{enumerate_ih0, ih0_index, ih0_initial_embedding, ih0_model, IH0_ALPHABET};
use crate::tasks::mnist::{
    augment, crop_25, mnist_forward, smnist_forward, AugmentConfig, LabeledImage, MnistModel,
    MnistSplits, SmnistModel, CROP_SIDE,
};

use super::adam::{AdamState, LrDrop, LrSchedule};
use super::backward::{
    ih_sequence_grad, ih_sequence_loss, mnist_image_grad, reduce_in_order, smnist_image_grad,
    softmax_cross_entropy, BackwardOptions, ImageGrad,
};
use super::checkpoint::{Checkpoint, MetricRow};
use super::model::{Gradients, IhModel, Learnable};

/// XOR mask separating the evaluation stream from the training stream.
pub const EVAL_SEED_XOR: u64 = 0x9E37_79B9_7F4A_7C15;
const AUGMENT_TAG: u64 = 0xA0_6E17;
const SHUFFLE_TAG: u64 = 0x5_4F1E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Batches per epoch for generated tasks; image tasks always make one
    /// pass over the training split.
    pub steps_per_epoch: usize,
    pub max_epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_drop: Option<LrDrop>,
    pub eval_size: usize,
    pub seed: u64,
    /// Stop once the evaluation accuracy reaches this value.
    #[serde(default)]
    pub early_stop_accuracy: Option<f64>,
    /// Record `wall_ms = 0` so metrics files are byte-identical across runs.
    #[serde(default)]
    pub deterministic: bool,
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            steps_per_epoch: 10_000,
            max_epochs: 100,
            lr: 0.01,
            lr_drop: None,
            eval_size: 10_000,
            seed: 0,
            early_stop_accuracy: Some(0.995),
            deterministic: false,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoffeeError::InvalidArgument(m.into()));
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.max_epochs == 0 {
            return bad("batch_size, steps_per_epoch and max_epochs must be positive");
        }
        if self.eval_size == 0 {
            return bad("eval_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be a positive finite number");
        }
        if let Some(d) = self.lr_drop {
            if !(d.lr > 0.0 && d.lr.is_finite()) {
                return bad("lr_drop.lr must be a positive finite number");
            }
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1");
        }
        Ok(())
    }

    /// Run `f` on a pool of the configured size.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.threads {
            None => Ok(f()),
            Some(t) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .map_err(|e| CoffeeError::InvalidArgument(format!("thread pool: {e}")))?;
                Ok(pool.install(f))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Mean loss per supervised position (per image for MNIST).
    pub loss: f64,
    pub accuracy: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub best_model: M,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: Vec<MetricRow>,
    pub best_accuracy: f64,
    pub epochs: usize,
    /// Batch-mean training loss after every optimizer step.
    pub step_losses: Vec<f64>,
    pub samples_seen: u64,
    pub test: Option<EvalResult>,
}

struct Clock {
    start: Instant,
    deterministic: bool,
}

impl Clock {
    fn new(deterministic: bool) -> Self {
        Self { start: Instant::now(), deterministic }
    }

    fn ms(&self) -> u64 {
        if self.deterministic {
            0
        } else {
            self.start.elapsed().as_millis() as u64
        }
    }
}

fn row(epoch: usize, step: u64, split: &str, r: EvalResult, lr: f64, wall_ms: u64) -> MetricRow {
    MetricRow { epoch, step, split: split.into(), loss: r.loss, accuracy: r.accuracy, lr, wall_ms }
}

struct PreparedIh {
    indices: Vec<usize>,
    target: PredictionTarget,
}

fn prepare_ih(vocab: &Vocab, samples: &[IHSample]) -> Result<Vec<PreparedIh>> {
    samples
        .iter()
        .map(|s| Ok(PreparedIh { indices: vocab.indices(&s.tokens)?, target: s.prediction_target(vocab)? }))
        .collect()
}

/// Mean loss per supervised position and per-sequence accuracy.
pub fn evaluate_ih(model: &IhModel, samples: &[IHSample]) -> Result<EvalResult> {
    let prepared = prepare_ih(&model.vocab, samples)?;
    let parts: Vec<Result<(f64, usize, bool)>> = prepared
        .par_iter()
        .map(|p| {
            let (loss, preds) = ih_sequence_loss(model, &p.indices, &p.target)?;
            let ok = preds.iter().zip(&p.target.positions).all(|(a, (_, c))| a == c);
            Ok((loss, p.target.positions.len(), ok))
        })
        .collect();
    let (mut loss, mut positions, mut hits) = (0.0, 0usize, 0usize);
    for part in parts {
        let (l, n, ok) = part?;
        loss += l;
        positions += n;
        hits += ok as usize;
    }
    if positions == 0 {
        return Err(CoffeeError::InvalidArgument("evaluation set has no supervised positions".into()));
    }
    Ok(EvalResult { loss: loss / positions as f64, accuracy: hits as f64 / samples.len() as f64 })
}

/// Batch-mean loss and gradients over a batch of samples.
pub fn ih_batch_grad(
    model: &IhModel,
    samples: &[IHSample],
    opts: BackwardOptions,
) -> Result<(f64, Gradients, f64)> {
    let prepared = prepare_ih(&model.vocab, samples)?;
    let positions: usize = prepared.iter().map(|p| p.target.positions.len()).sum();
    if positions == 0 {
        return Err(CoffeeError::InvalidArgument("batch has no supervised positions".into()));
    }
    let (loss, mut grads, hits) = reduce_in_order(model, prepared.len(), |k| {
        let p = &prepared[k];
        let g = ih_sequence_grad(model, &p.indices, &p.target, opts)?;
        let ok = g.all_correct(&p.target);
        Ok((g.loss, g.grads, ok))
    })?;
    grads.scale(1.0 / positions as f64);
    let acc = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    Ok((loss / positions as f64, grads, acc))
}

pub fn ih_checkpoint(
    model: &IhModel,
    adam: &AdamState,
    task: &str,
    config: serde_json::Value,
    metrics: &[MetricRow],
    seed: u64,
) -> Checkpoint {
    let mut c = Checkpoint::new(task, model.layer.kind(), model.layer.n(), model.layer.d());
    c.vocab = model.vocab.symbols().to_vec();
    c.alphabet = model.vocab.alphabet().to_vec();
    c.output_filter = matches!(&model.layer, SsmLayer::Coffee(p) if p.has_output_filter());
    c.frozen_row = model.embedding.frozen_row;
    c.squared_distance = model.squared_distance;
    c.store_params(model);
    c.store_adam(model, adam);
    c.config = config;
    c.metrics = metrics.to_vec();
    c.seeds.insert("train".into(), seed);
    c.seeds.insert("eval".into(), seed ^ EVAL_SEED_XOR);
    c
}

/// Train `model` on freshly generated samples of `task`.
///
/// The training and evaluation streams are seeded with `seed` and
/// `seed ^ EVAL_SEED_XOR`. `on_row` sees every metrics row as it is produced.
pub fn train_ih(
    mut model: IhModel,
    task: &IHConfig,
    cfg: &TrainConfig,
    on_row: &mut (dyn FnMut(&MetricRow) + Send),
) -> Result<TrainOutcome<IhModel>> {
    task.validate()?;
    cfg.validate()?;
    if model.vocab != task.vocab()? {
        return Err(CoffeeError::InvalidArgument("model vocabulary does not match the task".into()));
    }
    let snapshot = json!({ "task": task, "train": cfg });
    let clock = Clock::new(cfg.deterministic);
    let mut train_rng = RngState::new(cfg.seed);
    let mut eval_rng = RngState::new(cfg.seed ^ EVAL_SEED_XOR);
    let mut adam = AdamState::new(&model, cfg.lr);
    let mut schedule = LrSchedule::new(cfg.lr, cfg.lr_drop);
    let mut metrics = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, IhModel, Checkpoint)> = None;
    let mut epochs = 0;
    let mut step = 0u64;
    cfg.install(|| -> Result<()> {
        for epoch in 1..=cfg.max_epochs {
            epochs = epoch;
            let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
            for _ in 0..cfg.steps_per_epoch {
                let batch = gen_ih_batch(task, &mut train_rng, cfg.batch_size)?;
                let (loss, grads, acc) = ih_batch_grad(&model, &batch, BackwardOptions::default())?;
                adam.lr = schedule.current();
                adam.step(&mut model, &grads)?;
                step += 1;
                step_losses.push(loss);
                loss_sum += loss;
                acc_sum += acc;
            }
            let steps = cfg.steps_per_epoch as f64;
            let train = EvalResult { loss: loss_sum / steps, accuracy: acc_sum / steps };
            let r = row(epoch, step, "train", train, adam.lr, clock.ms());
            on_row(&r);
            metrics.push(r);
            schedule.observe(train.loss);

            let eval_set = gen_ih_batch(task, &mut eval_rng, cfg.eval_size)?;
            let ev = evaluate_ih(&model, &eval_set)?;
            let r = row(epoch, step, "eval", ev, adam.lr, clock.ms());
            on_row(&r);
            metrics.push(r);
            if best.as_ref().map_or(true, |(a, _, _)| ev.accuracy > *a) {
                let ck = ih_checkpoint(&model, &adam, "ih", snapshot.clone(), &metrics, cfg.seed);
                best = Some((ev.accuracy, model.clone(), ck));
            }
            if cfg.early_stop_accuracy.is_some_and(|t| ev.accuracy >= t) {
                break;
            }
        }
        Ok(())
    })??;
    let (best_accuracy, best_model, best_ck) = best.expect("at least one epoch ran");
    let last = ih_checkpoint(&model, &adam, "ih", snapshot, &metrics, cfg.seed);
    Ok(TrainOutcome {
        model,
        best_model,
        best: best_ck,
        last,
        metrics,
        best_accuracy,
        epochs,
        step_losses,
        samples_seen: step * cfg.batch_size as u64,
        test: None,
    })
}

/// The toy model with its fixed dynamics; only the embedding is learned.
pub fn ih0_train_model() -> Result<IhModel> {
    let symbols = IH0_ALPHABET.to_vec();
    Ok(IhModel {
        layer: SsmLayer::Coffee(ih0_model()),
        embedding: EmbeddingTable::new(ih0_initial_embedding()),
        vocab: Vocab::new(symbols.clone(), symbols)?,
        squared_distance: false,
        train_layer: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ih0Run {
    pub embedding: Matrix,
    /// `(step, loss, accuracy)` before the first and after every update.
    pub history: Vec<(usize, f64, f64)>,
    pub steps: usize,
}

/// Full-batch Adam on the six embedding entries, stopping at 100% accuracy
/// or after `max_steps` updates.
pub fn train_ih0(lr: f64, max_steps: usize) -> Result<Ih0Run> {
    let mut model = ih0_train_model()?;
    let data: Vec<PreparedIh> = enumerate_ih0()
        .iter()
        .map(|s| {
            Ok(PreparedIh {
                indices: s.tokens.iter().map(|&t| ih0_index(t)).collect::<Result<_>>()?,
                target: PredictionTarget { positions: vec![(3, ih0_index(s.target)?)] },
            })
        })
        .collect::<Result<_>>()?;
    let batch_loss = |m: &IhModel| -> Result<(f64, Gradients, f64)> {
        let mut grads = Gradients::zeros_like(m);
        let (mut loss, mut hits) = (0.0, 0);
        for p in &data {
            let g = ih_sequence_grad(m, &p.indices, &p.target, BackwardOptions::default())?;
            hits += g.all_correct(&p.target) as usize;
            loss += g.loss;
            grads.add_assign(&g.grads);
        }
        let n = data.len() as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads, hits as f64 / n))
    };
    let mut adam = AdamState::new(&model, lr);
    let mut history = Vec::new();
    let mut steps = 0;
    loop {
        let (loss, grads, acc) = batch_loss(&model)?;
        history.push((steps, loss, acc));
        if acc >= 1.0 || steps >= max_steps {
            break;
        }
        adam.step(&mut model, &grads)?;
        steps += 1;
    }
    Ok(Ih0Run { embedding: model.embedding.table, history, steps })
}

/// Image models trained with per-image cross-entropy.
pub trait ImageModel: Learnable + Clone + Send + Sync {
    const TASK: &'static str;
    /// Image as fed to the model, before augmentation.
    fn prepare(&self, raw: &Matrix) -> Result<Matrix>;
    fn image_grad(&self, x: &Matrix, label: usize) -> Result<ImageGrad>;
    fn image_loss(&self, x: &Matrix, label: usize) -> Result<(f64, usize)>;
    fn checkpoint_meta(&self) -> Checkpoint;
}

fn logits_loss(logits: &[f64], label: usize) -> (f64, usize) {
    (softmax_cross_entropy(logits, label).0, crate::pipeline::predict(logits))
}

impl ImageModel for MnistModel {
    const TASK: &'static str = "mnist";

    fn prepare(&self, raw: &Matrix) -> Result<Matrix> {
        crop_25(raw)
    }

    fn image_grad(&self, x: &Matrix, label: usize) -> Result<ImageGrad> {
        mnist_image_grad(self, x, label)
    }

    fn image_loss(&self, x: &Matrix, label: usize) -> Result<(f64, usize)> {
        Ok(logits_loss(&mnist_forward(self, x)?.logits, label))
    }

    fn checkpoint_meta(&self) -> Checkpoint {
        let l = &self.layers[0];
        let mut c = Checkpoint::new(Self::TASK, l.kind(), l.n(), CROP_SIDE);
        c.output_filter = matches!(l, SsmLayer::Coffee(p) if p.has_output_filter());
        c
    }
}

impl ImageModel for SmnistModel {
    const TASK: &'static str = "smnist";

    fn prepare(&self, raw: &Matrix) -> Result<Matrix> {
        Ok(raw.clone())
    }

    fn image_grad(&self, x: &Matrix, label: usize) -> Result<ImageGrad> {
        smnist_image_grad(self, x, label)
    }

    fn image_loss(&self, x: &Matrix, label: usize) -> Result<(f64, usize)> {
        Ok(logits_loss(&smnist_forward(self, x)?.logits, label))
    }

    fn checkpoint_meta(&self) -> Checkpoint {
        match &self.layer {
            Some(l) => Checkpoint::new(Self::TASK, l.kind(), l.n(), 1),
            None => {
                let mut c = Checkpoint::new(Self::TASK, ModelKind::Coffee, 0, 1);
                c.with_ssm = false;
                c
            }
        }
    }
}

fn prepare_images<M: ImageModel>(model: &M, images: &[LabeledImage]) -> Result<Vec<(Matrix, usize)>> {
    images.iter().map(|i| Ok((model.prepare(&i.pixels)?, usize::from(i.label)))).collect()
}

pub fn evaluate_images<M: ImageModel>(model: &M, data: &[(Matrix, usize)]) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(CoffeeError::InvalidArgument("evaluation set is empty".into()));
    }
    let parts: Vec<Result<(f64, usize)>> =
        data.par_iter().map(|(x, y)| model.image_loss(x, *y)).collect();
    let (mut loss, mut hits) = (0.0, 0usize);
    for (part, (_, y)) in parts.into_iter().zip(data) {
        let (l, p) = part?;
        loss += l;
        hits += (p == *y) as usize;
    }
    let n = data.len() as f64;
    Ok(EvalResult { loss: loss / n, accuracy: hits as f64 / n })
}

fn image_checkpoint<M: ImageModel>(
    model: &M,
    adam: &AdamState,
    config: serde_json::Value,
    metrics: &[MetricRow],
    seed: u64,
) -> Checkpoint {
    let mut c = model.checkpoint_meta();
    c.store_params(model);
    c.store_adam(model, adam);
    c.config = config;
    c.metrics = metrics.to_vec();
    c.seeds.insert("train".into(), seed);
    c
}

/// Epoch loop over the training split with augmentation, validation after
/// every epoch, best-by-validation model, and a final test evaluation of
/// that model.
pub fn train_images<M: ImageModel>(
    mut model: M,
    data: &MnistSplits,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
    on_row: &mut (dyn FnMut(&MetricRow) + Send),
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(CoffeeError::InvalidArgument("training and validation splits must be non-empty".into()));
    }
    let train = prepare_images(&model, &data.train)?;
    let val = prepare_images(&model, &data.val)?;
    let test = prepare_images(&model, &data.test)?;
    let snapshot = json!({ "augment": aug, "train": cfg });
    let clock = Clock::new(cfg.deterministic);
    let mut adam = AdamState::new(&model, cfg.lr);
    let mut schedule = LrSchedule::new(cfg.lr, cfg.lr_drop);
    let mut metrics = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, M, Checkpoint)> = None;
    let mut epochs = 0;
    let mut step = 0u64;
    let mut seen = 0u64;
    let test_result = cfg.install(|| -> Result<Option<EvalResult>> {
        for epoch in 1..=cfg.max_epochs {
            epochs = epoch;
            let mut order: Vec<usize> = (0..train.len()).collect();
            RngState::derive(cfg.seed ^ SHUFFLE_TAG, epoch as u64).shuffle(&mut order);
            let (mut loss_sum, mut hits) = (0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let (loss, mut grads, ok) = reduce_in_order(&model, chunk.len(), |k| {
                    let idx = chunk[k];
                    let stream = (epoch as u64) << 32 | idx as u64;
                    let mut rng = RngState::derive(cfg.seed ^ AUGMENT_TAG, stream);
                    let (x, y) = &train[idx];
                    let g = model.image_grad(&augment(x, aug, &mut rng), *y)?;
                    Ok((g.loss, g.grads, g.prediction == *y))
                })?;
                grads.scale(1.0 / chunk.len() as f64);
                adam.lr = schedule.current();
                adam.step(&mut model, &grads)?;
                step += 1;
                seen += chunk.len() as u64;
                step_losses.push(loss / chunk.len() as f64);
                loss_sum += loss;
                hits += ok.iter().filter(|&&h| h).count();
            }
            let n = train.len() as f64;
            let tr = EvalResult { loss: loss_sum / n, accuracy: hits as f64 / n };
            let r = row(epoch, step, "train", tr, adam.lr, clock.ms());
            on_row(&r);
            metrics.push(r);
            schedule.observe(tr.loss);

            let ev = evaluate_images(&model, &val)?;
            let r = row(epoch, step, "val", ev, adam.lr, clock.ms());
            on_row(&r);
            metrics.push(r);
            if best.as_ref().map_or(true, |(a, _, _)| ev.accuracy > *a) {
                let ck = image_checkpoint(&model, &adam, snapshot.clone(), &metrics, cfg.seed);
                best = Some((ev.accuracy, model.clone(), ck));
            }
            if cfg.early_stop_accuracy.is_some_and(|t| ev.accuracy >= t) {
                break;
            }
        }
        if test.is_empty() {
            return Ok(None);
        }
        let best_model = &best.as_ref().expect("at least one epoch ran").1;
        let te = evaluate_images(best_model, &test)?;
        let r = row(epochs, step, "test", te, adam.lr, clock.ms());
        on_row(&r);
        metrics.push(r);
        Ok(Some(te))
    })??;
    let (best_accuracy, best_model, mut best_ck) = best.expect("at least one epoch ran");
    best_ck.metrics = metrics.clone();
    let last = image_checkpoint(&model, &adam, snapshot, &metrics, cfg.seed);
    Ok(TrainOutcome {
        model,
        best_model,
        best: best_ck,
        last,
        metrics,
        best_accuracy,
        epochs,
        step_losses,
        samples_seen: seen,
        test: test_result,
    })
}

pub fn train_mnist(
    model: MnistModel,
    data: &MnistSplits,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
    on_row: &mut (dyn FnMut(&MetricRow) + Send),
) -> Result<TrainOutcome<MnistModel>> {
    train_images(model, data, aug, cfg, on_row)
}

pub fn train_smnist(
    model: SmnistModel,
    data: &MnistSplits,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
    on_row: &mut (dyn FnMut(&MetricRow) + Send),
) -> Result<TrainOutcome<SmnistModel>> {
    train_images(model, data, aug, cfg, on_row)
}
