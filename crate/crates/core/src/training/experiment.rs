//! Experiment protocols: single holdout runs, k-fold cross-validation,
//! repeated runs, ablations, and loss/optimizer/learning-rate sweeps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{make_splits, Role, SamplePair, SplitKind, SplitPlan};
use crate::losses::LossKind;
use crate::metrics::{aggregate_runs, MetricsReport, SetMetrics, DEFAULT_THRESHOLD};
use crate::model::{MmccNet, ModelConfig, Variant};
use crate::tensor::Tensor;

use super::{evaluate, train, OptimizerConfig, OptimizerKind, Predictor, Result, TrainLog, TrainPlan, TrainingError};

/// Learning rates of the learning-rate sweep, in report order.
pub const DEFAULT_LR_GRID: [f64; 6] = [3e-4, 4e-4, 5e-4, 2e-3, 1e-3, 1e-4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Holdout,
    Kfold5,
    Multirun10,
    Ablate,
    LossSweep,
    OptimizerSweep,
    LrSweep,
}

impl Protocol {
    pub const ALL: [Protocol; 7] = [
        Protocol::Holdout,
        Protocol::Kfold5,
        Protocol::Multirun10,
        Protocol::Ablate,
        Protocol::LossSweep,
        Protocol::OptimizerSweep,
        Protocol::LrSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Holdout => "holdout",
            Protocol::Kfold5 => "kfold5",
            Protocol::Multirun10 => "multirun10",
            Protocol::Ablate => "ablate",
            Protocol::LossSweep => "loss_sweep",
            Protocol::OptimizerSweep => "optimizer_sweep",
            Protocol::LrSweep => "lr_sweep",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = TrainingError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| TrainingError::UnknownProtocol(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub protocol: Protocol,
    /// Independent runs of `multirun10`.
    pub runs: usize,
    /// Folds of `kfold5`.
    pub folds: usize,
    /// Runs per row for the other protocols.
    pub repeats: usize,
    /// Base seed; run `i` of a row uses `seed + i`.
    pub seed: u64,
    pub lr_grid: Vec<f64>,
    pub losses: Vec<LossKind>,
    pub optimizers: Vec<OptimizerKind>,
    pub variants: Vec<Variant>,
    pub threshold: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            protocol: Protocol::Holdout,
            runs: 10,
            folds: 5,
            repeats: 1,
            seed: 0,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            losses: vec![
                LossKind::Bce,
                LossKind::Dice,
                LossKind::L2dice,
                LossKind::FocalJoint,
                LossKind::Joint,
                LossKind::JointL2,
            ],
            optimizers: OptimizerKind::ALL.to_vec(),
            variants: Variant::ALL.to_vec(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// What one run changes relative to the base configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSetup {
    pub row: String,
    pub run: usize,
    pub seed: u64,
    pub fold: Option<usize>,
    pub variant: Option<Variant>,
    pub loss: Option<LossKind>,
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
}

/// A trainable predictor the protocols can drive.
pub trait Segmenter: Predictor {
    fn fit(&mut self, train: &[SamplePair], val: &[SamplePair]) -> Result<TrainLog>;
}

/// The network with a plan and optimizer settings, seeded per run.
#[derive(Clone, Debug)]
pub struct ModelSegmenter {
    pub model: MmccNet<f32>,
    pub plan: TrainPlan,
    pub optimizer: OptimizerConfig,
}

impl ModelSegmenter {
    /// Apply the run's overrides to the base settings. The run seed drives both
    /// initialization and shuffling.
    pub fn new(model: &ModelConfig, plan: &TrainPlan, optimizer: &OptimizerConfig, setup: &RunSetup) -> Result<Self> {
        let mut config = model.clone();
        if let Some(v) = setup.variant {
            config = config.with_variant(v);
        }
        config.init_seed = setup.seed;
        let mut plan = plan.clone();
        plan.seed = setup.seed;
        if let Some(kind) = setup.loss {
            plan.loss.kind = kind;
        }
        let mut optimizer = *optimizer;
        if let Some(kind) = setup.optimizer {
            optimizer.kind = kind;
        }
        if let Some(lr) = setup.lr {
            optimizer.lr = lr;
        }
        Ok(Self {
            model: MmccNet::new(&config)?,
            plan,
            optimizer,
        })
    }
}

impl Predictor for ModelSegmenter {
    fn predict(&mut self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.model.predict(images)?)
    }
}

impl Segmenter for ModelSegmenter {
    fn fit(&mut self, train_set: &[SamplePair], val: &[SamplePair]) -> Result<TrainLog> {
        let (model, log) = train(self.model.clone(), train_set, val, &self.plan, self.optimizer)?;
        self.model = model;
        Ok(log)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub setup: RunSetup,
    pub metrics: SetMetrics,
    pub log: TrainLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub runs: Vec<RunResult>,
    /// Mean, SD and 95% interval per metric, with two or more runs.
    pub stats: Option<MetricsReport>,
}

impl ResultRow {
    fn new(label: String, runs: Vec<RunResult>) -> Result<Self> {
        let metrics: Vec<SetMetrics> = runs.iter().map(|r| r.metrics).collect();
        let stats = if runs.len() >= 2 {
            Some(aggregate_runs(&common_maps(&metrics))?)
        } else {
            None
        };
        Ok(Self { label, runs, stats })
    }

    /// Per-run metric means (the fold average for `kfold5`).
    pub fn mean(&self) -> SetMetrics {
        mean_metrics(&self.runs.iter().map(|r| r.metrics).collect::<Vec<_>>())
    }
}

/// Metric maps restricted to keys every run has (AUC can be undefined).
pub(crate) fn common_maps(metrics: &[SetMetrics]) -> Vec<std::collections::BTreeMap<String, f64>> {
    let all_auc = metrics.iter().all(|m| m.auc.is_some());
    metrics
        .iter()
        .map(|m| {
            let mut map = m.to_map();
            if !all_auc {
                map.remove("auc");
            }
            map
        })
        .collect()
}

pub(crate) fn mean_metrics(metrics: &[SetMetrics]) -> SetMetrics {
    let n = metrics.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SetMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    let all_auc = !metrics.is_empty() && metrics.iter().all(|m| m.auc.is_some());
    SetMetrics {
        accuracy: mean(&|m| m.accuracy),
        precision: mean(&|m| m.precision),
        recall: mean(&|m| m.recall),
        dice: mean(&|m| m.dice),
        iou: mean(&|m| m.iou),
        hausdorff: mean(&|m| m.hausdorff),
        auc: all_auc.then(|| mean(&|m| m.auc.unwrap_or(0.0))),
        images: metrics.iter().map(|m| m.images).sum(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub protocol: Protocol,
    pub rows: Vec<ResultRow>,
}

pub type SegmenterFactory<'a> = dyn FnMut(&RunSetup) -> Result<Box<dyn Segmenter>> + 'a;

struct Partition {
    train: Vec<SamplePair>,
    val: Vec<SamplePair>,
    test: Vec<SamplePair>,
}

fn select(samples: &[SamplePair], plan: &SplitPlan, keep: impl Fn(Role) -> bool) -> Vec<SamplePair> {
    samples
        .iter()
        .filter(|s| plan.role_of(&s.id).is_some_and(&keep))
        .cloned()
        .collect()
}

fn holdout_partition(samples: &[SamplePair], split: Option<&SplitPlan>, seed: u64) -> Result<Partition> {
    let owned;
    let plan = match split {
        Some(p) => p,
        None => {
            let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
            owned = make_splits(&ids, SplitKind::Table1, seed)?;
            &owned
        }
    };
    let part = Partition {
        train: select(samples, plan, |r| r == Role::Train),
        val: select(samples, plan, |r| r == Role::Val),
        test: select(samples, plan, |r| r == Role::Test),
    };
    if part.train.is_empty() {
        return Err(TrainingError::EmptyTrainSet);
    }
    if part.test.is_empty() {
        return Err(TrainingError::EmptyEvalSet);
    }
    Ok(part)
}

fn run_once(
    factory: &mut SegmenterFactory<'_>,
    setup: RunSetup,
    part: &Partition,
    threshold: f64,
) -> Result<RunResult> {
    let mut seg = factory(&setup)?;
    let log = seg.fit(&part.train, &part.val)?;
    let report = evaluate(seg.as_mut(), &part.test, threshold)?;
    Ok(RunResult {
        setup,
        metrics: report.mean,
        log,
    })
}

/// Run a protocol end to end. `split` fixes the train/val/test assignment for
/// every protocol except `kfold5`; without it a seeded 80/10/10 split is drawn.
pub fn run_experiment(
    spec: &ExperimentSpec,
    samples: &[SamplePair],
    split: Option<&SplitPlan>,
    factory: &mut SegmenterFactory<'_>,
) -> Result<ExperimentResult> {
    if samples.is_empty() {
        return Err(TrainingError::EmptyTrainSet);
    }
    let base = |row: &str, run: usize| RunSetup {
        row: row.to_string(),
        run,
        seed: spec.seed + run as u64,
        ..RunSetup::default()
    };
    let mut rows = Vec::new();
    match spec.protocol {
        Protocol::Kfold5 => {
            let k = spec.folds;
            if k < 2 || k > samples.len() {
                return Err(TrainingError::IncompatibleFolds {
                    folds: k,
                    samples: samples.len(),
                });
            }
            let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
            let plan = make_splits(&ids, SplitKind::Kfold(k), spec.seed)?;
            let mut runs = Vec::with_capacity(k);
            for fold in 0..k {
                let part = Partition {
                    train: select(samples, &plan, |r| r != Role::Fold(fold)),
                    val: Vec::new(),
                    test: select(samples, &plan, |r| r == Role::Fold(fold)),
                };
                let setup = RunSetup {
                    fold: Some(fold),
                    seed: spec.seed,
                    ..base("kfold", fold)
                };
                runs.push(run_once(factory, setup, &part, spec.threshold)?);
            }
            rows.push(ResultRow::new(format!("{k}-fold"), runs)?);
        }
        protocol => {
            let part = holdout_partition(samples, split, spec.seed)?;
            let settings: Vec<(String, RunSetup)> = match protocol {
                Protocol::Holdout => vec![("holdout".into(), RunSetup::default())],
                Protocol::Multirun10 => vec![("multirun".into(), RunSetup::default())],
                Protocol::Ablate => spec
                    .variants
                    .iter()
                    .map(|&v| {
                        (
                            v.name().to_string(),
                            RunSetup {
                                variant: Some(v),
                                ..RunSetup::default()
                            },
                        )
                    })
                    .collect(),
                Protocol::LossSweep => spec
                    .losses
                    .iter()
                    .map(|&l| {
                        (
                            l.name().to_string(),
                            RunSetup {
                                loss: Some(l),
                                ..RunSetup::default()
                            },
                        )
                    })
                    .collect(),
                Protocol::OptimizerSweep => spec
                    .optimizers
                    .iter()
                    .map(|&o| {
                        (
                            o.name().to_string(),
                            RunSetup {
                                optimizer: Some(o),
                                ..RunSetup::default()
                            },
                        )
                    })
                    .collect(),
                Protocol::LrSweep => spec
                    .lr_grid
                    .iter()
                    .map(|&lr| {
                        (
                            format!("lr {lr:e}"),
                            RunSetup {
                                lr: Some(lr),
                                ..RunSetup::default()
                            },
                        )
                    })
                    .collect(),
                Protocol::Kfold5 => unreachable!("handled above"),
            };
            let repeats = if protocol == Protocol::Multirun10 {
                spec.runs
            } else {
                spec.repeats
            };
            if repeats == 0 {
                return Err(TrainingError::InvalidPlan("run count must be at least 1".into()));
            }
            for (label, template) in settings {
                let mut runs = Vec::with_capacity(repeats);
                for run in 0..repeats {
                    let setup = RunSetup {
                        variant: template.variant,
                        loss: template.loss,
                        optimizer: template.optimizer,
                        lr: template.lr,
                        ..base(&label, run)
                    };
                    runs.push(run_once(factory, setup, &part, spec.threshold)?);
                }
                rows.push(ResultRow::new(label, runs)?);
            }
        }
    }
    Ok(ExperimentResult {
        protocol: spec.protocol,
        rows,
    })
}
