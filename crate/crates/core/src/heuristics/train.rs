use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, normalize, Dataset};
use crate::nn::{cross_entropy, Batch, ModelState, OptimizerConfig};
use crate::partition::{pool, Split};
use crate::schedule::{Phase, Scheduler};

use super::eval::evaluate_probs;
use super::{ExperimentConfig, MetricsRow, Normalization, Result, RunResult, StopReason, TransferRecord};
use super::{evaluate, Evaluation, HeuristicKind};

/// Cohorts converted to batches, normalised per the config.
pub(super) struct Cohorts {
    pub institutions: Vec<Batch>,
    pub validation: Batch,
    pub test: Batch,
    pub feature_dim: usize,
    pub num_classes: usize,
}

fn to_batch(ds: &Dataset, norm: Normalization) -> Result<Batch> {
    Ok(match norm {
        Normalization::PerCohort => normalize(ds, None)?.0.to_batch()?,
        Normalization::Off => ds.to_batch()?,
    })
}

impl Cohorts {
    pub fn separate(split: &Split, norm: Normalization) -> Result<Self> {
        Ok(Self {
            institutions: split.institutions.iter().map(|d| to_batch(d, norm)).collect::<Result<_>>()?,
            validation: to_batch(&split.validation, norm)?,
            test: to_batch(&split.test, norm)?,
            feature_dim: split.validation.feature_dim(),
            num_classes: split.validation.num_classes(),
        })
    }

    /// One cohort holding every institution's samples.
    pub fn pooled(split: &Split, norm: Normalization) -> Result<Self> {
        Ok(Self {
            institutions: vec![to_batch(&pool(split), norm)?],
            validation: to_batch(&split.validation, norm)?,
            test: to_batch(&split.test, norm)?,
            feature_dim: split.validation.feature_dim(),
            num_classes: split.validation.num_classes(),
        })
    }
}

/// One pass over `cohort` in shuffled mini-batches after fresh jitter.
/// Returns the number of optimizer steps taken.
fn run_epoch(
    model: &mut ModelState,
    cohort: &Batch,
    opt: &OptimizerConfig,
    batch_size: usize,
    sigma: f64,
    lr: f64,
    rng: &mut dyn RngCore,
) -> Result<usize> {
    let data = augment(cohort, sigma, rng)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut steps = 0;
    for chunk in order.chunks(batch_size) {
        let batch = Batch {
            features: data.features.select_rows(chunk),
            labels: chunk.iter().map(|&i| data.labels[i]).collect(),
        };
        model.train_step(&batch, opt, lr, rng)?;
        steps += 1;
    }
    Ok(steps)
}

/// `(train_acc, val_acc, val_loss)` in eval mode, on the clean cohort.
fn score(model: &ModelState, cohort: &Batch, validation: &Batch) -> Result<(f64, f64, f64)> {
    let train = evaluate(model, cohort, 1)?.top1;
    let probs = model.predict(&validation.features)?;
    let val_acc = evaluate_probs(&probs, &validation.labels, 1)?.top1;
    let val_loss = cross_entropy(&probs, &validation.labels)?;
    Ok((train, val_acc, val_loss))
}

/// Trains for a fixed number of epochs at a constant rate, one row per epoch.
pub fn train_on<R: RngCore>(
    model: &mut ModelState,
    cohort: &Batch,
    validation: &Batch,
    epochs: usize,
    learning_rate: f64,
    cfg: &ExperimentConfig,
    rng: &mut R,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(epochs);
    for global_epoch in 0..epochs {
        run_epoch(model, cohort, &cfg.optimizer, cfg.batch_size, cfg.augment_sigma, learning_rate, rng)?;
        let (train_accuracy, validation_accuracy, validation_loss) = score(model, cohort, validation)?;
        rows.push(MetricsRow {
            global_epoch,
            phase: Phase::A,
            institution: None,
            learning_rate,
            train_accuracy,
            validation_accuracy,
            validation_loss,
        });
    }
    Ok(rows)
}

/// State of one scheduled run: the model in play, its RNG stream and log.
pub(super) struct Session<'a> {
    cfg: &'a ExperimentConfig,
    pub cohorts: &'a Cohorts,
    pub model: ModelState,
    pub rng: ChaCha8Rng,
    pub sched: Scheduler,
    pub rows: Vec<MetricsRow>,
    pub transfers: Vec<TransferRecord>,
    pub steps: usize,
}

impl<'a> Session<'a> {
    /// Seeds the stream, draws the initial weights from it, and scales the
    /// schedule by `scale`.
    pub fn new(cfg: &'a ExperimentConfig, cohorts: &'a Cohorts, seed: u64, scale: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = cfg.model.specs(cohorts.feature_dim, cohorts.num_classes)?;
        let model = ModelState::new(specs, cfg.optimizer.kind, &mut rng)?;
        Ok(Self {
            cfg,
            cohorts,
            model,
            rng,
            sched: Scheduler::new(&cfg.schedule, cfg.optimizer.learning_rate, scale),
            rows: Vec::new(),
            transfers: Vec::new(),
            steps: 0,
        })
    }

    pub fn global_epoch(&self) -> usize {
        self.rows.len()
    }

    pub fn at_limit(&self) -> bool {
        self.rows.len() >= self.cfg.max_epochs
    }

    /// Trains one epoch on cohort `index`, logs the row and returns the
    /// validation loss. `label` is what the row reports as the holder.
    pub fn epoch(&mut self, index: usize, label: Option<usize>) -> Result<f64> {
        let cohort = &self.cohorts.institutions[index];
        let global_epoch = self.global_epoch();
        let lr = self.sched.lr(global_epoch);
        let phase = self.sched.phase();
        self.steps += run_epoch(
            &mut self.model,
            cohort,
            &self.cfg.optimizer,
            self.cfg.batch_size,
            self.cfg.augment_sigma,
            lr,
            &mut self.rng,
        )?;
        let (train_accuracy, validation_accuracy, validation_loss) =
            score(&self.model, cohort, &self.cohorts.validation)?;
        self.rows.push(MetricsRow {
            global_epoch,
            phase,
            institution: label,
            learning_rate: lr,
            train_accuracy,
            validation_accuracy,
            validation_loss,
        });
        Ok(validation_loss)
    }

    pub fn finish(self, kind: HeuristicKind, seed: u64, stop: StopReason) -> Result<RunResult> {
        let models = vec![self.model];
        finish_models(self.cfg, self.cohorts, kind, seed, models, self.rows, self.transfers, self.steps, stop)
    }
}

fn top_k(cfg: &ExperimentConfig) -> usize {
    cfg.top_k.unwrap_or(1)
}

/// Final scoring; the only place the test cohort is touched.
#[allow(clippy::too_many_arguments)]
pub(super) fn finish_models(
    cfg: &ExperimentConfig,
    cohorts: &Cohorts,
    kind: HeuristicKind,
    seed: u64,
    models: Vec<ModelState>,
    rows: Vec<MetricsRow>,
    transfers: Vec<TransferRecord>,
    optimizer_steps: usize,
    stop: StopReason,
) -> Result<RunResult> {
    let predict = |b: &Batch| super::ensemble_probs(&models, &b.features);
    let trained: Vec<&Batch> = match kind {
        HeuristicKind::SingleInstitution { index } => vec![&cohorts.institutions[index]],
        _ => cohorts.institutions.iter().collect(),
    };
    let mut hits = 0.0;
    let mut total = 0usize;
    for b in &trained {
        hits += evaluate_probs(&predict(b)?, &b.labels, 1)?.top1 * b.len() as f64;
        total += b.len();
    }
    let validation_accuracy = evaluate_probs(&predict(&cohorts.validation)?, &cohorts.validation.labels, 1)?.top1;
    let mut test_evaluations = 0;
    let test: Evaluation = evaluate_probs(&predict(&cohorts.test)?, &cohorts.test.labels, top_k(cfg))?;
    test_evaluations += 1;
    Ok(RunResult {
        kind,
        seed,
        models,
        rows,
        transfers,
        optimizer_steps,
        stop,
        train_accuracy: hits / total as f64,
        validation_accuracy,
        test,
        test_evaluations,
    })
}
