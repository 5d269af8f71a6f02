#![allow(dead_code)]

use fedcycle_core::data::{gen_synthetic, SyntheticKind, SyntheticSpec};
use fedcycle_core::heuristics::{ExperimentConfig, ModelConfig};
use fedcycle_core::nn::OptimizerConfig;
use fedcycle_core::partition::{stratified_split, Split, SplitPlan};
use fedcycle_core::schedule::PlateauPolicy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Rings with `k` institutions of `per_institution` patients and validation
/// and test cohorts of the same size.
pub fn small_split(k: usize, per_institution: usize, seed: u64) -> Split {
    let mut spec = SyntheticSpec::new(SyntheticKind::Rings, (k + 2) * per_institution);
    spec.noise_rate = 0.1;
    let ds = gen_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    stratified_split(&ds, &SplitPlan::uniform(k, per_institution, per_institution, per_institution, seed).unwrap())
        .unwrap()
}

/// Short schedule and a small network so structural tests stay fast.
pub fn quick_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        model: ModelConfig { hidden: vec![8], ..ModelConfig::default() },
        optimizer: OptimizerConfig { learning_rate: 0.05, ..OptimizerConfig::sgd_momentum() },
        batch_size: 16,
        max_epochs: 400,
        seed,
        ..ExperimentConfig::default()
    };
    cfg.schedule.plateau = PlateauPolicy { patience: 3, decay_factor: 0.25, max_decays: 1, patience_scale: 1 };
    cfg
}
