//! Collaboration heuristics over a partitioned dataset, plus evaluation.

mod eval;
mod runs;
mod train;

pub use eval::{ensemble_probs, evaluate, evaluate_probs, Evaluation};
pub use runs::{
    run, run_central, run_cyclical_weight_transfer, run_ensemble, run_scaling_sweep, run_single_institution,
    run_cyclical_weight_transfer_over, run_single_weight_transfer, EnsembleResult, SweepPoint,
};
pub use train::train_on;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::nn::{validate_specs, LayerSpec, ModelState, NnError, OptimizerConfig};
use crate::partition::PartitionError;
use crate::schedule::{Phase, ScheduleConfig, ScheduleError};
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum HeuristicError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("network: {0}")]
    Nn(#[from] NnError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("partition: {0}")]
    Partition(#[from] PartitionError),
    #[error("schedule: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
}

pub type Result<T> = std::result::Result<T, HeuristicError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum HeuristicKind {
    SingleInstitution { index: usize },
    CentrallyHosted,
    EnsembleSingles,
    SingleWeightTransfer,
    CyclicalWeightTransfer { frequency: usize },
}

impl HeuristicKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeuristicKind::SingleInstitution { .. } => "single-institution",
            HeuristicKind::CentrallyHosted => "centrally-hosted",
            HeuristicKind::EnsembleSingles => "ensemble-singles",
            HeuristicKind::SingleWeightTransfer => "single-weight-transfer",
            HeuristicKind::CyclicalWeightTransfer { .. } => "cyclical-weight-transfer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Every cohort standardised by its own statistics.
    #[default]
    PerCohort,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    #[default]
    Memory,
    Socket,
}

/// Network shape. `layers` overrides the generated MLP when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub batchnorm: bool,
    pub dropout: f64,
    pub layers: Option<Vec<LayerSpec>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32, 32], batchnorm: false, dropout: 0.0, layers: None }
    }
}

impl ModelConfig {
    /// Affine → [batchnorm] → relu → [dropout] per hidden width, then the head.
    pub fn specs(&self, in_dim: usize, num_classes: usize) -> Result<Vec<LayerSpec>> {
        if let Some(layers) = &self.layers {
            validate_specs(layers)?;
            return Ok(layers.clone());
        }
        let mut specs = Vec::new();
        let mut width = in_dim;
        for &h in &self.hidden {
            specs.push(LayerSpec::affine(width, h));
            if self.batchnorm {
                specs.push(LayerSpec::batchnorm(h));
            }
            specs.push(LayerSpec::relu(h));
            if self.dropout > 0.0 {
                specs.push(LayerSpec::dropout(h, self.dropout));
            }
            width = h;
        }
        if num_classes <= 2 {
            specs.extend([LayerSpec::affine(width, 1), LayerSpec::sigmoid_head()]);
        } else {
            specs.extend([LayerSpec::affine(width, num_classes), LayerSpec::softmax_head(num_classes)]);
        }
        validate_specs(&specs)?;
        Ok(specs)
    }
}

fn default_batch_size() -> usize {
    32
}

fn default_max_epochs() -> usize {
    20_000
}

fn yes() -> bool {
    true
}

/// Everything a heuristic needs besides the split itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "OptimizerConfig::sgd_momentum")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Standard deviation of the per-epoch Gaussian feature jitter.
    #[serde(default)]
    pub augment_sigma: f64,
    #[serde(default = "yes")]
    pub transfer_carries_optimizer_state: bool,
    #[serde(default)]
    pub normalization: Normalization,
    /// Visit institutions in a seeded random order instead of ascending.
    #[serde(default)]
    pub shuffle_visit_order: bool,
    #[serde(default)]
    pub transport: TransportKind,
    /// `k` for top-k accuracy; absent means top-1 only.
    #[serde(default)]
    pub top_k: Option<usize>,
    /// Hard ceiling on global epochs in case the schedule never stops.
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::sgd_momentum(),
            schedule: ScheduleConfig::default(),
            batch_size: default_batch_size(),
            augment_sigma: 0.0,
            transfer_carries_optimizer_state: true,
            normalization: Normalization::PerCohort,
            shuffle_visit_order: false,
            transport: TransportKind::Memory,
            top_k: None,
            max_epochs: default_max_epochs(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HeuristicError::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.augment_sigma >= 0.0 && self.augment_sigma.is_finite()) {
            return Err(HeuristicError::InvalidArgument(format!(
                "augment_sigma must be non-negative, got {}",
                self.augment_sigma
            )));
        }
        if self.max_epochs == 0 {
            return Err(HeuristicError::InvalidArgument("max_epochs must be at least 1".into()));
        }
        if self.top_k == Some(0) {
            return Err(HeuristicError::InvalidArgument("top_k must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.schedule.validate()?;
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// One line per global epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub global_epoch: usize,
    pub phase: Phase,
    /// Holder of the model during the epoch; `None` for pooled training.
    pub institution: Option<usize>,
    pub learning_rate: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub validation_loss: f64,
}

/// A hand-off between institutions, logged at the start of `global_epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub global_epoch: usize,
    pub from: usize,
    pub to: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Schedule,
    EpochLimit,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub kind: HeuristicKind,
    pub seed: u64,
    /// The trained model, or every member for an ensemble.
    pub models: Vec<ModelState>,
    pub rows: Vec<MetricsRow>,
    pub transfers: Vec<TransferRecord>,
    pub optimizer_steps: usize,
    pub stop: StopReason,
    /// Final accuracy over every cohort the run trained on.
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub test: Evaluation,
    /// How often the test cohort was scored; always 1.
    pub test_evaluations: usize,
}

impl RunResult {
    pub fn test_accuracy(&self) -> f64 {
        self.test.top1
    }

    pub fn validation_losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.validation_loss).collect()
    }
}
