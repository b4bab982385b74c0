//! Optimizers, the training loop with early stopping, evaluation,
//! checkpoints, and multi-run experiment protocols.

mod checkpoint;
mod experiment;
mod gradcheck;
mod optimizer;
mod report;

use std::io;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{stack_samples, DataError, SamplePair};
use crate::losses::{batch_loss, LossConfig, LossError};
use crate::metrics::{image_metrics, ImageMetrics, MetricsError, SetMetrics, DEFAULT_THRESHOLD};
use crate::model::{BnStats, MmccNet, ModelError, Param};
use crate::tensor::{BatchNormMode, Tape, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, manifest_hash, save_checkpoint, CHECKPOINT_VERSION};
pub use experiment::{
    run_experiment, ExperimentResult, ExperimentSpec, ModelSegmenter, Protocol, ResultRow, RunResult, RunSetup,
    Segmenter, DEFAULT_LR_GRID,
};
pub use gradcheck::network_grad_check;
pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind};
pub use report::{format_table, read_run_summaries, table_csv, table_markdown, write_experiment, RunSummary, Table};

/// Weight of each deep-supervision term in the training loss.
pub const AUX_LOSS_WEIGHT: f64 = 0.3;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("no samples to evaluate")]
    EmptyEvalSet,
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch} (samples {ids:?}); lower the learning rate or check the inputs")]
    NonFinite {
        epoch: usize,
        batch: usize,
        ids: Vec<String>,
        value: f64,
    },
    #[error("invalid training plan: {0}")]
    InvalidPlan(String),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint checksum mismatch (file is corrupt)")]
    Checksum,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint model manifest hash {found} does not match the expected {expected}")]
    ManifestMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Corrupt(String),
    #[error("unknown protocol `{0}`")]
    UnknownProtocol(String),
    #[error("{folds} folds need at least {folds} samples, found {samples}")]
    IncompatibleFolds { folds: usize, samples: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainingError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        TrainingError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = TrainingError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation Dice improvement before stopping; 0 disables.
    pub patience: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub deep_supervision: bool,
    /// Probability threshold for the Dice values in the log.
    pub threshold: f64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            patience: 10,
            loss: LossConfig::default(),
            seed: 0,
            deep_supervision: false,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainingError::InvalidPlan(format!(
                "epochs ({}) and batch_size ({}) must be at least 1",
                self.epochs, self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Mean per-image Dice of the training batches as they were processed.
    pub train_dice: f64,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept, when validation data was given.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    /// `epoch,train_loss,val_loss,train_dice,val_dice` lines, empty fields for
    /// missing validation values.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        let mut s = String::from("epoch,train_loss,val_loss,train_dice,val_dice\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.train_loss,
                opt(r.val_loss),
                r.train_dice,
                opt(r.val_dice)
            ));
        }
        s
    }
}

/// Resumable training state beyond the parameters and optimizer moments.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub best_dice: Option<f64>,
    pub bad_epochs: usize,
    pub finished: bool,
    pub log: TrainLog,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Snapshot {
    pub params: Vec<Param<f32>>,
    pub bn: Vec<BnStats<f32>>,
}

impl Snapshot {
    fn of(model: &MmccNet<f32>) -> Self {
        Self {
            params: model.params().to_vec(),
            bn: model.bn_stats().to_vec(),
        }
    }

    fn restore(&self, model: &mut MmccNet<f32>) {
        model.params_mut().clone_from_slice(&self.params);
        model.bn_stats_mut().clone_from_slice(&self.bn);
    }
}

/// A model, its optimizer, a plan, and the progress made so far.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: MmccNet<f32>,
    pub optimizer: Optimizer,
    pub plan: TrainPlan,
    pub state: TrainState,
    pub(crate) best: Option<Snapshot>,
}

/// Average-pool a `(N, 1, H, W)` mask by `factor`.
fn pool_mask(mask: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (n, c, mh, mw) = mask.dims4()?;
    let (fy, fx) = (mh / h, mw / w);
    let mut out = Vec::with_capacity(n * c * h * w);
    let scale = 1.0 / (fy * fx) as f32;
    for plane in mask.data().chunks(mh * mw) {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in 0..fy {
                    let row = (y * fy + dy) * mw + x * fx;
                    s += plane[row..row + fx].iter().sum::<f32>();
                }
                out.push(s * scale);
            }
        }
    }
    Ok(Tensor::new(vec![n, c, h, w], out)?)
}

fn mean_dice(pred: &Tensor<f32>, mask: &Tensor<f32>, threshold: f64) -> Result<f64> {
    let n = pred.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let c = crate::metrics::confusion_counts(&pred.batch_item(i)?, &mask.batch_item(i)?, threshold)?;
        total += crate::metrics::basic_metrics(&c).dice;
    }
    Ok(total)
}

impl Trainer {
    pub fn new(model: MmccNet<f32>, optimizer: OptimizerConfig, plan: TrainPlan) -> Result<Self> {
        plan.validate()?;
        optimizer.validate()?;
        if plan.deep_supervision && !model.config().deep_supervision {
            return Err(TrainingError::InvalidPlan(
                "deep supervision requested but the model has no auxiliary heads".into(),
            ));
        }
        Ok(Self {
            model,
            optimizer: Optimizer::new(optimizer),
            plan,
            state: TrainState::default(),
            best: None,
        })
    }

    /// Sample order for `epoch`, a function of the plan seed and the epoch only.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn train_batch(&mut self, batch: &[&SamplePair], epoch: usize, index: usize) -> Result<(f64, f64)> {
        let (images, masks) = stack_samples(batch)?;
        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape, true);
        let x = tape.constant(images);
        let out = self.model.forward(&mut tape, &params, x, BatchNormMode::Train)?;
        let prob = tape.value(out.prob).clone();
        let (mut loss, grad) = batch_loss(&self.plan.loss, &prob, &masks)?;
        let mut root = tape.attach_scalar(out.prob, loss as f32, grad)?;
        if self.plan.deep_supervision {
            for &aux in &out.aux {
                let (_, _, h, w) = tape.value(aux).dims4()?;
                let target = pool_mask(&masks, h, w)?;
                let (l, g) = batch_loss(&self.plan.loss, tape.value(aux), &target)?;
                let g = g.map(|v| v * AUX_LOSS_WEIGHT as f32);
                let term = tape.attach_scalar(aux, (l * AUX_LOSS_WEIGHT) as f32, g)?;
                root = tape.add(root, term)?;
                loss += l * AUX_LOSS_WEIGHT;
            }
        }
        if !loss.is_finite() {
            return Err(TrainingError::NonFinite {
                epoch,
                batch: index,
                ids: batch.iter().map(|s| s.id.clone()).collect(),
                value: loss,
            });
        }
        tape.backward(root)?;
        let grads: Vec<_> = params.iter().map(|&p| tape.grad(p)).collect();
        self.optimizer.step(self.model.params_mut(), &grads)?;
        Ok((loss, mean_dice(&prob, &masks, self.plan.threshold)?))
    }

    /// Run one epoch and record it. Returns `false` once training is over.
    pub fn step_epoch(&mut self, train: &[SamplePair], val: &[SamplePair]) -> Result<bool> {
        if self.state.finished || self.state.epoch >= self.plan.epochs {
            self.state.finished = true;
            return Ok(false);
        }
        if train.is_empty() {
            return Err(TrainingError::EmptyTrainSet);
        }
        let epoch = self.state.epoch;
        let order = self.epoch_order(epoch, train.len());
        let (mut loss_sum, mut dice_sum) = (0.0, 0.0);
        for (index, chunk) in order.chunks(self.plan.batch_size).enumerate() {
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, dice) = self.train_batch(&batch, epoch, index)?;
            loss_sum += loss * batch.len() as f64;
            dice_sum += dice;
        }
        let n = train.len() as f64;
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_loss: None,
            train_dice: dice_sum / n,
            val_dice: None,
        };
        if !val.is_empty() {
            let preds = predict_samples(&mut self.model, val, self.plan.batch_size)?;
            let mut loss = 0.0;
            let mut dice = 0.0;
            for (p, s) in preds.iter().zip(val) {
                let mask = s.mask.clone().reshape(p.shape().to_vec())?;
                loss += batch_loss(&self.plan.loss, p, &mask)?.0;
                dice += mean_dice(p, &mask, self.plan.threshold)?;
            }
            let m = val.len() as f64;
            record.val_loss = Some(loss / m);
            let dice = dice / m;
            record.val_dice = Some(dice);
            if self.state.best_dice.is_none_or(|b| dice > b) {
                self.state.best_dice = Some(dice);
                self.state.log.best_epoch = Some(epoch);
                self.state.bad_epochs = 0;
                self.best = Some(Snapshot::of(&self.model));
            } else {
                self.state.bad_epochs += 1;
            }
        }
        self.state.log.epochs.push(record);
        self.state.epoch += 1;
        if self.plan.patience > 0 && self.state.bad_epochs >= self.plan.patience {
            self.state.log.stopped_early = true;
            self.state.finished = true;
        }
        if self.state.epoch >= self.plan.epochs {
            self.state.finished = true;
        }
        Ok(!self.state.finished)
    }

    /// Change the epoch budget. A run that ended only because it used up the
    /// old budget continues; one that stopped early stays stopped.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.plan.epochs = epochs;
        self.state.finished = self.state.log.stopped_early || self.state.epoch >= epochs;
    }

    /// Train until the plan's epoch budget or early stopping.
    pub fn run(&mut self, train: &[SamplePair], val: &[SamplePair]) -> Result<()> {
        while self.step_epoch(train, val)? {}
        Ok(())
    }

    /// Restore the best-validation weights (if any) and hand back the parts.
    pub fn finish(mut self) -> (MmccNet<f32>, Optimizer, TrainLog) {
        if let Some(best) = self.best.take() {
            best.restore(&mut self.model);
        }
        (self.model, self.optimizer, self.state.log)
    }
}

/// Train `model` on `train`, early-stopping on `val` Dice when it is nonempty.
pub fn train(
    model: MmccNet<f32>,
    train: &[SamplePair],
    val: &[SamplePair],
    plan: &TrainPlan,
    optimizer: OptimizerConfig,
) -> Result<(MmccNet<f32>, TrainLog)> {
    let mut trainer = Trainer::new(model, optimizer, plan.clone())?;
    trainer.run(train, val)?;
    let (model, _, log) = trainer.finish();
    Ok((model, log))
}

/// Anything that maps `(N, 3, H, W)` images to `(N, 1, H, W)` probabilities.
pub trait Predictor {
    fn predict(&mut self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Predictor for MmccNet<f32> {
    fn predict(&mut self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(MmccNet::predict(self, images)?)
    }
}

/// Per-sample `(1, 1, H, W)` probability maps, in sample order.
pub fn predict_samples(model: &mut dyn Predictor, samples: &[SamplePair], batch: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let (images, _) = stack_samples(&refs)?;
        let pred = model.predict(&images)?;
        for i in 0..chunk.len() {
            out.push(pred.batch_item(i)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(id, metrics)` in sample order.
    pub per_image: Vec<(String, ImageMetrics)>,
    pub mean: SetMetrics,
}

/// Inference-mode metrics for each sample and their means.
pub fn evaluate(model: &mut dyn Predictor, samples: &[SamplePair], threshold: f64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(TrainingError::EmptyEvalSet);
    }
    let preds = predict_samples(model, samples, 8)?;
    let mut per_image = Vec::with_capacity(samples.len());
    for (p, s) in preds.iter().zip(samples) {
        let mask = s.mask.clone().reshape(p.shape().to_vec())?;
        per_image.push((s.id.clone(), image_metrics(p, &mask, threshold)?));
    }
    let items: Vec<ImageMetrics> = per_image.iter().map(|(_, m)| *m).collect();
    Ok(EvalReport {
        mean: SetMetrics::from_images(&items),
        per_image,
    })
}
