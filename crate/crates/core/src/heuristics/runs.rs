use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::par;
use crate::partition::Split;
use crate::schedule::Action;
use crate::transport::{deserialize, serialize, MemoryTransport, SocketTransport, Transport};

use super::train::{finish_models, Cohorts, Session};
use super::{ExperimentConfig, HeuristicError, HeuristicKind, Result, RunResult, StopReason, TransferRecord, TransportKind};

fn member_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

fn visit_order(cfg: &ExperimentConfig, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k).collect();
    if cfg.shuffle_visit_order {
        // Separate stream so the training stream is untouched.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        order.shuffle(&mut rng);
    }
    order
}

fn open_transport(kind: TransportKind, k: usize) -> Result<Box<dyn Transport>> {
    Ok(match kind {
        TransportKind::Memory => Box::new(MemoryTransport::new(k)),
        TransportKind::Socket => Box::new(SocketTransport::new(k)?),
    })
}

/// Serialises the session's model, ships it to `to` and continues with what
/// arrived.
fn hand_off(session: &mut Session, transport: &mut dyn Transport, carry: bool, from: usize, to: usize) -> Result<()> {
    let global_epoch = session.global_epoch();
    let epoch_field = u32::try_from(global_epoch)
        .map_err(|_| HeuristicError::InvalidArgument(format!("epoch {global_epoch} exceeds the packet field")))?;
    let origin = u16::try_from(from)
        .map_err(|_| HeuristicError::InvalidArgument(format!("institution {from} exceeds the packet field")))?;
    let packet = serialize(&session.model, epoch_field, origin, carry)?;
    let bytes = packet.len();
    let delivered = transport.deliver(to, packet)?;
    session.model = deserialize(&delivered, &session.model)?.0;
    session.transfers.push(TransferRecord { global_epoch, from, to, bytes });
    Ok(())
}

fn check_index(split: &Split, index: usize) -> Result<()> {
    if index >= split.k() {
        return Err(HeuristicError::InvalidArgument(format!(
            "institution {index} out of range for {} institutions",
            split.k()
        )));
    }
    Ok(())
}

/// Trains on cohort `index` alone (seed offset by `index`) until the
/// schedule stops.
pub fn run_single_institution(cfg: &ExperimentConfig, split: &Split, index: usize) -> Result<RunResult> {
    check_index(split, index)?;
    let cohorts = Cohorts::separate(split, cfg.normalization)?;
    let seed = member_seed(cfg.seed, index);
    let mut s = Session::new(cfg, &cohorts, seed, 1)?;
    let stop = loop {
        if s.at_limit() {
            break StopReason::EpochLimit;
        }
        let loss = s.epoch(index, Some(index))?;
        if s.sched.observe(loss) == Action::Stop {
            break StopReason::Schedule;
        }
    };
    s.finish(HeuristicKind::SingleInstitution { index }, seed, stop)
}

/// Trains on the pooled institutional data.
pub fn run_central(cfg: &ExperimentConfig, split: &Split) -> Result<RunResult> {
    let cohorts = Cohorts::pooled(split, cfg.normalization)?;
    let mut s = Session::new(cfg, &cohorts, cfg.seed, 1)?;
    let stop = loop {
        if s.at_limit() {
            break StopReason::EpochLimit;
        }
        let loss = s.epoch(0, None)?;
        if s.sched.observe(loss) == Action::Stop {
            break StopReason::Schedule;
        }
    };
    s.finish(HeuristicKind::CentrallyHosted, cfg.seed, stop)
}

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    /// Scores of the averaged model; `models` holds every member.
    pub ensemble: RunResult,
    /// Each member as its own single-institution run.
    pub members: Vec<RunResult>,
}

impl EnsembleResult {
    pub fn mean_member_accuracy(&self) -> f64 {
        self.members.iter().map(RunResult::test_accuracy).sum::<f64>() / self.members.len() as f64
    }
}

/// Trains one model per institution independently and averages their
/// output probabilities.
pub fn run_ensemble(cfg: &ExperimentConfig, split: &Split) -> Result<EnsembleResult> {
    let indices: Vec<usize> = (0..split.k()).collect();
    let members = par::map(&indices, |&i| run_single_institution(cfg, split, i)).into_iter().collect::<Result<Vec<_>>>()?;
    let cohorts = Cohorts::separate(split, cfg.normalization)?;
    let models = members.iter().map(|m| m.models[0].clone()).collect();
    let rows = members.iter().flat_map(|m| m.rows.iter().cloned()).collect();
    let steps = members.iter().map(|m| m.optimizer_steps).sum();
    let stop = if members.iter().all(|m| m.stop == StopReason::Schedule) {
        StopReason::Schedule
    } else {
        StopReason::EpochLimit
    };
    let ensemble =
        finish_models(cfg, &cohorts, HeuristicKind::EnsembleSingles, cfg.seed, models, rows, Vec::new(), steps, stop)?;
    Ok(EnsembleResult { ensemble, members })
}

/// Visits each institution once. Away from the last institution a plateau
/// moves the model on without decaying the rate; the last one runs the full
/// decay ladder until the schedule stops. The best validation loss carries
/// across institutions.
pub fn run_single_weight_transfer(cfg: &ExperimentConfig, split: &Split) -> Result<RunResult> {
    let mut transport = open_transport(cfg.transport, split.k())?;
    let cohorts = Cohorts::separate(split, cfg.normalization)?;
    let order = visit_order(cfg, split.k());
    let mut s = Session::new(cfg, &cohorts, cfg.seed, 1)?;
    let mut stop = StopReason::Schedule;
    'visits: for (visit, &holder) in order.iter().enumerate() {
        if visit > 0 {
            hand_off(&mut s, transport.as_mut(), cfg.transfer_carries_optimizer_state, order[visit - 1], holder)?;
        }
        let last = visit + 1 == order.len();
        loop {
            if s.at_limit() {
                stop = StopReason::EpochLimit;
                break 'visits;
            }
            let loss = s.epoch(holder, Some(holder))?;
            if last {
                if s.sched.observe(loss) == Action::Stop {
                    break 'visits;
                }
            } else if s.sched.observe_plateau(loss) {
                break;
            }
        }
    }
    s.finish(HeuristicKind::SingleWeightTransfer, cfg.seed, stop)
}

/// Round-robin over institutions, `frequency` epochs per visit, with the
/// schedule's patience and decay period scaled by the ring size.
pub fn run_cyclical_weight_transfer(cfg: &ExperimentConfig, split: &Split, frequency: usize) -> Result<RunResult> {
    let mut transport = open_transport(cfg.transport, split.k())?;
    run_cyclical_weight_transfer_over(cfg, split, frequency, transport.as_mut())
}

/// [`run_cyclical_weight_transfer`] over a caller-supplied channel.
pub fn run_cyclical_weight_transfer_over(
    cfg: &ExperimentConfig,
    split: &Split,
    frequency: usize,
    transport: &mut dyn Transport,
) -> Result<RunResult> {
    if frequency == 0 {
        return Err(HeuristicError::InvalidArgument("transfer frequency must be at least 1 epoch".into()));
    }
    let k = split.k();
    let cohorts = Cohorts::separate(split, cfg.normalization)?;
    let order = visit_order(cfg, k);
    let mut s = Session::new(cfg, &cohorts, cfg.seed, k)?;
    let holder_at = |epoch: usize| order[(epoch / frequency) % k];
    let stop = loop {
        if s.at_limit() {
            break StopReason::EpochLimit;
        }
        let epoch = s.global_epoch();
        let holder = holder_at(epoch);
        if epoch > 0 && holder != holder_at(epoch - 1) {
            hand_off(&mut s, transport, cfg.transfer_carries_optimizer_state, holder_at(epoch - 1), holder)?;
        }
        let loss = s.epoch(holder, Some(holder))?;
        if s.sched.observe(loss) == Action::Stop {
            break StopReason::Schedule;
        }
    };
    s.finish(HeuristicKind::CyclicalWeightTransfer { frequency }, cfg.seed, stop)
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub m: usize,
    pub result: RunResult,
}

impl SweepPoint {
    pub fn test_accuracy(&self) -> f64 {
        self.result.test_accuracy()
    }
}

/// Cyclical transfer every epoch over the first `m` institutions, per `m`.
pub fn run_scaling_sweep(cfg: &ExperimentConfig, split: &Split, m_values: &[usize]) -> Result<Vec<SweepPoint>> {
    if let Some(&bad) = m_values.iter().find(|&&m| m == 0 || m > split.k()) {
        return Err(HeuristicError::InvalidArgument(format!(
            "sweep point m = {bad} outside 1..={}",
            split.k()
        )));
    }
    par::map(m_values, |&m| {
        let sub = split.first(m)?;
        Ok(SweepPoint { m, result: run_cyclical_weight_transfer(cfg, &sub, 1)? })
    })
    .into_iter()
    .collect()
}

/// Dispatches on `kind`; an ensemble returns only its combined result.
pub fn run(cfg: &ExperimentConfig, split: &Split, kind: HeuristicKind) -> Result<RunResult> {
    match kind {
        HeuristicKind::SingleInstitution { index } => run_single_institution(cfg, split, index),
        HeuristicKind::CentrallyHosted => run_central(cfg, split),
        HeuristicKind::EnsembleSingles => Ok(run_ensemble(cfg, split)?.ensemble),
        HeuristicKind::SingleWeightTransfer => run_single_weight_transfer(cfg, split),
        HeuristicKind::CyclicalWeightTransfer { frequency } => run_cyclical_weight_transfer(cfg, split, frequency),
    }
}
