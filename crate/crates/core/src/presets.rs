//! Ready-made synthetic experiments: the four-institution desk task and the
//! twenty-institution scaling task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, Dataset, SyntheticKind, SyntheticSpec};
use crate::heuristics::{ExperimentConfig, ModelConfig};
use crate::nn::OptimizerConfig;
use crate::partition::{stratified_split, Split, SplitPlan};
use crate::schedule::{ExpDecayPolicy, PlateauPolicy, ScheduleConfig};

/// Stream reserved for dataset generation, apart from training (0) and
/// visit-order shuffling (1).
const DATA_STREAM: u64 = 2;

/// Generates a dataset from a seed on the data stream.
pub fn synthesize(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, crate::data::DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    gen_synthetic(spec, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub data: SyntheticSpec,
    pub plan: SplitPlan,
    pub config: ExperimentConfig,
}

impl Experiment {
    /// Rings in 96 dimensions, two classes, 10% label noise, 4 × 400
    /// patients with 400 validation and 400 test patients. SGD with momentum
    /// at 1e-3, 0.99 per-epoch decay, and a patience-10 plateau allowing one
    /// ×0.25 decay.
    pub fn desk() -> Self {
        Self::rings(4, 400, 400)
    }

    /// Twenty small institutions, sized so one alone is close to chance.
    pub fn scaling() -> Self {
        Self::rings(20, 40, 200)
    }

    fn rings(k: usize, per_institution: usize, held_out: usize) -> Self {
        let mut data = SyntheticSpec::new(SyntheticKind::Rings, k * per_institution + 2 * held_out);
        data.noise_rate = 0.1;
        data.feature_dim = 96;
        let config = ExperimentConfig {
            model: ModelConfig { hidden: vec![64, 64], ..ModelConfig::default() },
            optimizer: OptimizerConfig { learning_rate: 1e-3, ..OptimizerConfig::sgd_momentum() },
            schedule: ScheduleConfig {
                plateau: PlateauPolicy { patience: 10, max_decays: 1, ..PlateauPolicy::default() },
                exp_decay: Some(ExpDecayPolicy { decay_per_period: 0.99, period: 1 }),
            },
            ..ExperimentConfig::default()
        };
        let plan = SplitPlan {
            institution_sizes: vec![per_institution; k],
            patients_validation: held_out,
            patients_test: held_out,
            seed: 0,
        };
        Self { data, plan, config }
    }

    /// Data, split and training all keyed to `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        Self {
            data: self.data,
            plan: SplitPlan { seed, ..self.plan.clone() },
            config: self.config.with_seed(seed),
        }
    }

    pub fn split(&self) -> Result<Split, crate::partition::PartitionError> {
        let ds = synthesize(&self.data, self.plan.seed)?;
        stratified_split(&ds, &self.plan)
    }
}
