//! Plain SGD training with a step learning-rate schedule.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{loss_and_gradients, Gradients};
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{ConfusionMatrix, LabeledImage};
use crate::error::{Error, Result};
use crate::graph::{partition_labels, BlockGrid, Connectivity, DagPlan};
use crate::model::{forward_image, CrrnParams, ModelConfig, PredictionMap};
use crate::tensor::{Mode, Tensor};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_every_epochs: usize,
    /// Decay a single time after `decay_every_epochs` instead of every
    /// `decay_every_epochs`.
    #[serde(default)]
    pub decay_once: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub hidden_dim: usize,
    pub residual_mid_channels: usize,
    pub num_classes: usize,
    /// Share of the training images held out when no validation set is
    /// given.
    pub val_fraction: f64,
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub connectivity: Connectivity,
    #[serde(default)]
    pub per_direction_params: bool,
    #[serde(default)]
    pub fuse_post_residual: bool,
    /// Keep `W` at zero: no information flows between blocks.
    #[serde(default)]
    pub ablate_context: bool,
    /// Record wall-clock seconds in epoch records (otherwise 0).
    #[serde(default = "default_true")]
    pub log_timing: bool,
    /// From this many completed epochs on, train with the running
    /// batch-norm statistics frozen, as inference uses them.
    #[serde(default)]
    pub freeze_bn_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_rate: 0.95,
            decay_every_epochs: 30,
            decay_once: false,
            epochs: 100,
            batch_size: 1,
            seed: 0,
            grad_clip_norm: None,
            grid_rows: 8,
            grid_cols: 8,
            hidden_dim: 256,
            residual_mid_channels: 4,
            num_classes: 2,
            val_fraction: 0.1,
            flip: false,
            connectivity: Connectivity::Eight,
            per_direction_params: false,
            fuse_post_residual: false,
            ablate_context: false,
            log_timing: true,
            freeze_bn_after: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!(
                "decay rate must be in (0, 1], got {}",
                self.decay_rate
            )));
        }
        if self.decay_every_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay_every_epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if let Some(c) = self.grad_clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, image_height: usize, image_width: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            image_height,
            image_width,
            channels,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            hidden_dim: self.hidden_dim,
            residual_mid_channels: self.residual_mid_channels,
            kernel_size: 3,
            num_classes: self.num_classes,
            connectivity: self.connectivity,
            per_direction_params: self.per_direction_params,
            fuse_post_residual: self.fuse_post_residual,
        }
    }

    /// Learning rate in effect once `completed_epochs` epochs have finished.
    pub fn learning_rate_after(&self, completed_epochs: usize) -> f64 {
        let steps = completed_epochs / self.decay_every_epochs;
        let steps = if self.decay_once { steps.min(1) } else { steps };
        let mut lr = self.learning_rate;
        for _ in 0..steps {
            lr *= self.decay_rate;
        }
        lr
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| gain * rng.random_range(-a..a)).collect()).expect("shape is non-empty")
}

/// Glorot-uniform weights, zero biases, unit batch-norm scales. `W` is
/// additionally scaled by 1/3 because up to three predecessors feed each
/// vertex.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<CrrnParams> {
    let mut params = CrrnParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, i, o, m, k) = (
        config.hidden_dim,
        config.input_dim(),
        config.output_dim(),
        config.residual_mid_channels,
        config.kernel_size,
    );
    for br in &mut params.branches {
        br.context.u = glorot(&mut rng, &[h, i], i, h, 1.0);
        br.context.w = glorot(&mut rng, &[h, h], h, h, 1.0 / 3.0);
        br.context.v = glorot(&mut rng, &[o, h], h, o, 1.0);
        br.residual.conv1 = glorot(&mut rng, &[m, 1, k, k], k * k, m * k * k, 1.0);
        br.residual.conv2 = glorot(&mut rng, &[1, m, k, k], m * k * k, k * k, 1.0);
        br.residual.bn1_scale.fill(1.0);
        br.residual.bn2_scale.fill(1.0);
    }
    Ok(params)
}

/// Optional global-norm clip, then `θ ← θ − λ·g` for every tensor.
pub fn sgd_step(params: &mut CrrnParams, grads: &Gradients, learning_rate: f64, clip: Option<f64>) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let mut factor = learning_rate;
    if let Some(max_norm) = clip {
        let norm = grads.global_norm();
        if norm > max_norm {
            factor *= max_norm / norm;
        }
    }
    let g = grads.named_tensors();
    let mut p = params.named_tensors_mut();
    if g.len() != p.len() {
        return Err(Error::Config("gradient layout does not match the parameters".into()));
    }
    for ((_, pt), (_, gt)) in p.iter_mut().zip(&g) {
        pt.axpy(-factor, gt)?;
    }
    if let Some((name, _)) = params.named_tensors().into_iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {name} after update")));
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate in effect after this epoch's schedule update.
    pub lr: f64,
    pub train_loss: f64,
    pub val_pa: Option<f64>,
    pub val_ca: Option<f64>,
    pub seconds: f64,
}

/// A labeled image cut into blocks.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub id: String,
    pub grid: BlockGrid,
    pub labels: Vec<Vec<u8>>,
    pub source: LabeledImage,
}

impl PreparedImage {
    pub fn new(image: &LabeledImage, config: &ModelConfig) -> Result<Self> {
        let (c, h, w) = image.extents();
        let expected = (config.channels, config.image_height, config.image_width);
        if (c, h, w) != expected {
            return Err(Error::ExtentMismatch {
                expected,
                found: (c, h, w),
            });
        }
        Ok(Self {
            id: image.id.clone(),
            grid: BlockGrid::partition(&image.image, config.grid_rows, config.grid_cols)?,
            labels: partition_labels(&image.labels, h, w, config.grid_rows, config.grid_cols)?,
            source: image.clone(),
        })
    }
}

/// Splits off a validation set with a seed-fixed shuffle. Returns
/// `(train, val)`.
pub fn split_validation(images: Vec<LabeledImage>, fraction: f64, seed: u64) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let n_val = (images.len() as f64 * fraction).floor() as usize;
    if n_val == 0 || n_val >= images.len() {
        return (images, Vec::new());
    }
    let mut idx: Vec<usize> = (0..images.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f5_0117_u64));
    let val_idx: std::collections::BTreeSet<usize> = idx[..n_val].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, img) in images.into_iter().enumerate() {
        if val_idx.contains(&i) {
            val.push(img);
        } else {
            train.push(img);
        }
    }
    (train, val)
}

/// Label map predicted in eval mode for a prepared image.
pub fn predict_prepared(params: &CrrnParams, plans: &[DagPlan; 4], image: &PreparedImage) -> Result<PredictionMap> {
    let tape = forward_image(&image.grid, plans, params, Mode::Eval)?;
    PredictionMap::from_logits(&tape.logits, &params.config)
}

pub fn evaluate(params: &CrrnParams, images: &[PreparedImage]) -> Result<ConfusionMatrix> {
    let plans = params.config.plans();
    let mut cm = ConfusionMatrix::new(params.config.num_classes);
    for img in images {
        let pred = predict_prepared(params, &plans, img)?;
        cm.accumulate(&img.source.labels, &pred.labels)?;
    }
    Ok(cm)
}

/// Owns the model and optimizer state between steps.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: CrrnParams,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub best_val_pa: Option<f64>,
    rng: ChaCha8Rng,
    plans: [DagPlan; 4],
    train: Vec<PreparedImage>,
    val: Vec<PreparedImage>,
}

impl Trainer {
    /// Fresh model sized from the first training image. Without an explicit
    /// validation set, `val_fraction` of `train` is held out.
    pub fn new(config: TrainConfig, train: Vec<LabeledImage>, val: Option<Vec<LabeledImage>>) -> Result<Self> {
        config.validate()?;
        let first = train.first().ok_or(Error::EmptyDataset)?;
        let (c, h, w) = first.extents();
        let model = config.model_config(h, w, c);
        let mut params = init_params(&model, config.seed)?;
        if config.ablate_context {
            params.branches.iter_mut().for_each(|b| b.context.w.fill(0.0));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::assemble(config, params, 0, None, rng, train, val)
    }

    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        train: Vec<LabeledImage>,
        val: Option<Vec<LabeledImage>>,
    ) -> Result<Self> {
        let mut trainer = Self::assemble(
            ckpt.train.clone(),
            ckpt.params.clone(),
            ckpt.epoch,
            ckpt.best_val_pa,
            ckpt.rng.restore(),
            train,
            val,
        )?;
        trainer.lr = ckpt.lr;
        Ok(trainer)
    }

    fn assemble(
        config: TrainConfig,
        params: CrrnParams,
        epoch: usize,
        best_val_pa: Option<f64>,
        rng: ChaCha8Rng,
        train: Vec<LabeledImage>,
        val: Option<Vec<LabeledImage>>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (train, val) = match val {
            Some(v) => (train, v),
            None => split_validation(train, config.val_fraction, config.seed),
        };
        let prep = |set: &[LabeledImage]| -> Result<Vec<PreparedImage>> {
            set.iter().map(|i| PreparedImage::new(i, &params.config)).collect()
        };
        let (train, val) = (prep(&train)?, prep(&val)?);
        for img in train.iter().chain(&val) {
            if let Some(&bad) = img
                .source
                .labels
                .iter()
                .find(|&&l| l != crate::graph::IGNORE_LABEL && l as usize >= params.config.num_classes)
            {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: params.config.num_classes,
                });
            }
        }
        Ok(Self {
            lr: config.learning_rate_after(epoch),
            plans: params.config.plans(),
            config,
            params,
            epoch,
            best_val_pa,
            rng,
            train,
            val,
        })
    }

    pub fn train_set(&self) -> &[PreparedImage] {
        &self.train
    }

    pub fn val_set(&self) -> &[PreparedImage] {
        &self.val
    }

    /// Batch-norm mode of the next training step.
    pub fn training_mode(&self) -> Mode {
        match self.config.freeze_bn_after {
            Some(k) if self.epoch >= k && self.params.stats_populated() => Mode::Eval,
            _ => Mode::Train,
        }
    }

    fn step_batch(&mut self, batch: &[usize]) -> Result<f64> {
        let mut total = Gradients::zeros_like(&self.params);
        let mut loss_sum = 0.0;
        let mode = self.training_mode();
        for &i in batch {
            let flipped;
            let img = if self.config.flip && self.rng.random_bool(0.5) {
                flipped = PreparedImage::new(&self.train[i].source.flipped(), &self.params.config)?;
                &flipped
            } else {
                &self.train[i]
            };
            let (loss, grads, tape) = loss_and_gradients(&self.params, &img.grid, &img.labels, &self.plans, mode)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(img.id.clone()));
            }
            if mode == Mode::Train {
                self.params.absorb_batch_stats(&tape);
            }
            total.axpy(1.0, &grads)?;
            loss_sum += loss;
        }
        total.scale(1.0 / batch.len() as f64);
        if self.config.ablate_context {
            total.branches.iter_mut().for_each(|b| b.context.w.fill(0.0));
        }
        sgd_step(&mut self.params, &total, self.lr, self.config.grad_clip_norm)?;
        Ok(loss_sum)
    }

    /// One pass over the shuffled training set, then validation and the
    /// schedule update.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            loss_sum += self.step_batch(batch)?;
        }
        self.epoch += 1;
        self.lr = self.config.learning_rate_after(self.epoch);
        let (val_pa, val_ca) = if self.val.is_empty() {
            (None, None)
        } else {
            let (pa, ca) = evaluate(&self.params, &self.val)?.metrics()?;
            (Some(pa), Some(ca))
        };
        if let Some(pa) = val_pa {
            if self.best_val_pa.is_none_or(|b| pa > b) {
                self.best_val_pa = Some(pa);
            }
        }
        Ok(EpochRecord {
            epoch: self.epoch,
            lr: self.lr,
            train_loss: loss_sum / self.train.len() as f64,
            val_pa,
            val_ca,
            seconds: if self.config.log_timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }

    /// Mean loss over the training set in train mode, without updating
    /// anything.
    pub fn probe_loss(&self) -> Result<f64> {
        let mut sum = 0.0;
        for img in &self.train {
            let tape = forward_image(&img.grid, &self.plans, &self.params, Mode::Train)?;
            sum += crate::model::nll_loss(&tape.logits, &img.labels, self.params.config.num_classes)?.0;
        }
        Ok(sum / self.train.len() as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            train: self.config.clone(),
            params: self.params.clone(),
            epoch: self.epoch,
            lr: self.lr,
            best_val_pa: self.best_val_pa,
            rng: RngState::capture(&self.rng),
        }
    }
}

/// Trains for `config.epochs` epochs. `on_epoch` sees every record together
/// with the trainer (for checkpointing); `is_best` is true when the epoch set
/// a new best validation PA.
pub fn train_loop(
    train: Vec<LabeledImage>,
    val: Option<Vec<LabeledImage>>,
    config: TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Trainer, bool) -> Result<()>,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(config, train, val)?;
    let mut log = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let before = trainer.best_val_pa;
        let record = trainer.run_epoch()?;
        let is_best = trainer.best_val_pa != before;
        on_epoch(&record, &trainer, is_best)?;
        log.push(record);
    }
    Ok((trainer.checkpoint(), log))
}
