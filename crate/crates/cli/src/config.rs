//! Experiment files: TOML with one table per concern.

use std::path::{Path, PathBuf};

use fedcycle_core::data::{load_csv, Dataset, SyntheticKind, SyntheticSpec};
use fedcycle_core::heuristics::{ExperimentConfig, HeuristicKind, ModelConfig, Normalization, TransportKind};
use fedcycle_core::nn::OptimizerConfig;
use fedcycle_core::partition::{stratified_split, Split, SplitPlan};
use fedcycle_core::presets::synthesize;
use fedcycle_core::schedule::ScheduleConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "OptimizerConfig::sgd_momentum")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(deserialize_with = "heuristic")]
    pub heuristic: HeuristicKind,
    pub sweep: Option<SweepSection>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSection {
    Rings(SyntheticParams),
    Blobs(SyntheticParams),
    Csv(CsvSource),
}

/// Unset fields take the generator defaults; `n_patients` defaults to the
/// number the split needs.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub n_patients: Option<usize>,
    pub samples_per_patient: Option<usize>,
    pub num_classes: Option<usize>,
    pub noise_rate: Option<f64>,
    pub feature_dim: Option<usize>,
    pub patient_spread: Option<f64>,
    pub sample_spread: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub institutions: Option<usize>,
    pub patients_per_institution: Option<usize>,
    pub institution_sizes: Option<Vec<usize>>,
    pub patients_validation: usize,
    pub patients_test: usize,
}

/// The remaining [`ExperimentConfig`] knobs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub augment_sigma: f64,
    pub transfer_carries_optimizer_state: bool,
    pub normalization: Normalization,
    pub shuffle_visit_order: bool,
    pub transport: TransportKind,
    pub top_k: Option<usize>,
    pub max_epochs: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        Self {
            batch_size: d.batch_size,
            augment_sigma: d.augment_sigma,
            transfer_carries_optimizer_state: d.transfer_carries_optimizer_state,
            normalization: d.normalization,
            shuffle_visit_order: d.shuffle_visit_order,
            transport: d.transport,
            top_k: d.top_k,
            max_epochs: d.max_epochs,
        }
    }
}

/// `kind` plus the one field that kind takes, if any.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeuristicSection {
    kind: String,
    index: Option<usize>,
    frequency: Option<usize>,
}

fn heuristic<'de, D: serde::Deserializer<'de>>(d: D) -> Result<HeuristicKind, D::Error> {
    use serde::de::Error;
    let h = HeuristicSection::deserialize(d)?;
    let (needs_index, needs_frequency) = match h.kind.as_str() {
        "single-institution" => (true, false),
        "cyclical-weight-transfer" => (false, true),
        "centrally-hosted" | "ensemble-singles" | "single-weight-transfer" => (false, false),
        other => {
            return Err(D::Error::custom(format!(
                "unknown heuristic `{other}`, expected one of single-institution, centrally-hosted, \
                 ensemble-singles, single-weight-transfer, cyclical-weight-transfer"
            )))
        }
    };
    for (field, present, needed) in [("index", h.index.is_some(), needs_index), ("frequency", h.frequency.is_some(), needs_frequency)] {
        if present != needed {
            let verb = if needed { "needs" } else { "does not take" };
            return Err(D::Error::custom(format!("{} {verb} `{field}`", h.kind)));
        }
    }
    Ok(match (h.kind.as_str(), h.index, h.frequency) {
        ("single-institution", Some(index), _) => HeuristicKind::SingleInstitution { index },
        ("cyclical-weight-transfer", _, Some(frequency)) => HeuristicKind::CyclicalWeightTransfer { frequency },
        ("centrally-hosted", ..) => HeuristicKind::CentrallyHosted,
        ("ensemble-singles", ..) => HeuristicKind::EnsembleSingles,
        _ => HeuristicKind::SingleWeightTransfer,
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Institution counts to try; defaults to every prefix of the ring.
    pub m: Option<Vec<usize>>,
}

impl ExperimentFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut file: Self = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let DatasetSection::Csv(src) = &mut file.dataset {
            if src.path.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                src.path = base.join(&src.path);
            }
        }
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds: at least one seed is required".into()));
        }
        self.plan(0)?;
        self.config(0).validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let HeuristicKind::SingleInstitution { index } = self.heuristic {
            let k = self.plan(0)?.k();
            if index >= k {
                return Err(CliError::Config(format!("heuristic.index: {index} but only {k} institutions")));
            }
        }
        if let Some(ms) = self.sweep.as_ref().and_then(|s| s.m.as_ref()) {
            let k = self.plan(0)?.k();
            if let Some(bad) = ms.iter().find(|&&m| m == 0 || m > k) {
                return Err(CliError::Config(format!("sweep.m: {bad} outside 1..={k}")));
            }
        }
        Ok(())
    }

    pub fn plan(&self, seed: u64) -> Result<SplitPlan, CliError> {
        let s = &self.split;
        let sizes = match (&s.institution_sizes, s.institutions, s.patients_per_institution) {
            (Some(sizes), None, None) => sizes.clone(),
            (None, Some(k), Some(per)) => vec![per; k],
            _ => {
                return Err(CliError::Config(
                    "split: give either institution_sizes or institutions with patients_per_institution".into(),
                ))
            }
        };
        let plan = SplitPlan {
            institution_sizes: sizes,
            patients_validation: s.patients_validation,
            patients_test: s.patients_test,
            seed,
        };
        plan.validate().map_err(|e| CliError::Config(format!("split: {e}")))?;
        Ok(plan)
    }

    pub fn config(&self, seed: u64) -> ExperimentConfig {
        let t = &self.training;
        ExperimentConfig {
            model: self.model.clone(),
            optimizer: self.optimizer,
            schedule: self.schedule,
            batch_size: t.batch_size,
            augment_sigma: t.augment_sigma,
            transfer_carries_optimizer_state: t.transfer_carries_optimizer_state,
            normalization: t.normalization,
            shuffle_visit_order: t.shuffle_visit_order,
            transport: t.transport,
            top_k: t.top_k,
            max_epochs: t.max_epochs,
            seed,
        }
    }

    /// Synthetic data is regenerated per seed; a CSV is loaded as is.
    pub fn dataset(&self, seed: u64) -> Result<Dataset, CliError> {
        let (kind, p) = match &self.dataset {
            DatasetSection::Csv(src) => {
                return load_csv(&src.path, src.num_classes)
                    .map_err(|e| CliError::Input(format!("dataset {}: {e}", src.path.display())));
            }
            DatasetSection::Rings(p) => (SyntheticKind::Rings, p),
            DatasetSection::Blobs(p) => (SyntheticKind::Blobs, p),
        };
        let plan = self.plan(seed)?;
        let needed = plan.institution_sizes.iter().sum::<usize>() + plan.patients_validation + plan.patients_test;
        let mut spec = SyntheticSpec::new(kind, p.n_patients.unwrap_or(needed));
        spec.samples_per_patient = p.samples_per_patient.unwrap_or(spec.samples_per_patient);
        spec.num_classes = p.num_classes.unwrap_or(spec.num_classes);
        spec.noise_rate = p.noise_rate.unwrap_or(spec.noise_rate);
        spec.feature_dim = p.feature_dim.unwrap_or(spec.feature_dim);
        spec.patient_spread = p.patient_spread.unwrap_or(spec.patient_spread);
        spec.sample_spread = p.sample_spread.unwrap_or(spec.sample_spread);
        synthesize(&spec, seed).map_err(|e| CliError::Runtime(format!("data (seed {seed}): {e}")))
    }

    pub fn split(&self, seed: u64) -> Result<Split, CliError> {
        let ds = self.dataset(seed)?;
        stratified_split(&ds, &self.plan(seed)?).map_err(|e| CliError::Runtime(format!("partition (seed {seed}): {e}")))
    }
}
