//! The JSON run configuration and its command-line overrides.

use std::path::{Path, PathBuf};

use mmcc::data::Difficulty;
use mmcc::losses::{LossConfig, LossKind};
use mmcc::model::{ModelConfig, Variant};
use mmcc::training::{ExperimentSpec, OptimizerConfig, OptimizerKind, TrainPlan};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// The full network at 288×384.
    Full,
    /// A narrow network at 64×96 for CPU runs.
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKindName {
    Table1,
    Kfold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub kind: SplitKindName,
    pub folds: usize,
    pub seed: u64,
    /// A split file to use instead of drawing one.
    pub file: Option<PathBuf>,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            kind: SplitKindName::Table1,
            folds: 5,
            seed: 0,
            file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub count: usize,
    pub difficulty: Difficulty,
    pub seed: u64,
    /// `(height, width)`; the model input size when absent.
    pub size: Option<[usize; 2]>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            count: 100,
            difficulty: Difficulty::Easy,
            seed: 0,
            size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Name recorded as the source of loaded samples.
    pub source: String,
    /// Resize loaded images and masks to the model input size.
    pub resize: bool,
    pub split: SplitSection,
    pub synth: SynthSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "dataset".into(),
            resize: true,
            split: SplitSection::default(),
            synth: SynthSection::default(),
        }
    }
}

/// `TrainPlan` plus the optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub deep_supervision: bool,
    pub threshold: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = TrainPlan::default();
        Self {
            epochs: p.epochs,
            batch_size: p.batch_size,
            patience: p.patience,
            loss: p.loss,
            seed: p.seed,
            deep_supervision: p.deep_supervision,
            threshold: p.threshold,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainSection {
    pub fn from_plan(p: &TrainPlan, optimizer: OptimizerConfig) -> Self {
        Self {
            epochs: p.epochs,
            batch_size: p.batch_size,
            patience: p.patience,
            loss: p.loss,
            seed: p.seed,
            deep_supervision: p.deep_supervision,
            threshold: p.threshold,
            optimizer,
        }
    }

    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            loss: self.loss,
            seed: self.seed,
            deep_supervision: self.deep_supervision,
            threshold: self.threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataSection,
    pub train: TrainSection,
    pub experiment: ExperimentSpec,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Full => ModelConfig::full(),
            Preset::Tiny => ModelConfig::tiny(),
        };
        Self {
            model,
            data: DataSection::default(),
            train: TrainSection::default(),
            experiment: ExperimentSpec::default(),
        }
    }

    /// The preset with `text` merged over it key by key. Keys the
    /// configuration does not know are errors.
    pub fn from_json(preset: Preset, text: &str) -> Result<Self, CliError> {
        let user: Value =
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config is not valid JSON: {e}")))?;
        if !user.is_object() {
            return Err(CliError::Usage("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("config serializes");
        merge(&mut merged, user);
        serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::preset(preset)),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(preset, &text)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.model.init_seed = seed;
            self.data.split.seed = seed;
            self.data.synth.seed = seed;
            self.train.seed = seed;
            self.experiment.seed = seed;
        }
        if let Some(lr) = o.lr {
            self.train.optimizer.lr = lr;
        }
        if let Some(epochs) = o.epochs {
            self.train.epochs = epochs;
        }
        if let Some(loss) = o.loss {
            self.train.loss.kind = loss;
        }
        if let Some(kind) = o.optimizer {
            self.train.optimizer.kind = kind;
        }
        if let Some(v) = o.variant {
            self.model = self.model.clone().with_variant(v);
        }
        if self.train.deep_supervision {
            self.model.deep_supervision = true;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: String| CliError::Usage(e);
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.train.plan().validate().map_err(|e| usage(e.to_string()))?;
        self.train.optimizer.validate().map_err(|e| usage(e.to_string()))?;
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Flags shared by the commands that read a configuration.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Seed for initialization, splitting, shuffling and synthesis.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    /// One of network1..network4.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: mmcc::losses::LossError| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    s.parse()
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: mmcc::model::ModelError| e.to_string())
}
