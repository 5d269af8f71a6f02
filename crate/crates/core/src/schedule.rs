//! Validation-plateau learning-rate ladder and the exponential-decay variant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauPolicy {
    pub patience: usize,
    pub decay_factor: f64,
    pub max_decays: usize,
    /// Multiplies `patience`; weight-transfer runs set it to the ring size.
    #[serde(default = "one")]
    pub patience_scale: usize,
}

fn one() -> usize {
    1
}

impl Default for PlateauPolicy {
    /// Patience 20, factor 0.25, three decays (phases A–D).
    fn default() -> Self {
        Self { patience: 20, decay_factor: 0.25, max_decays: 3, patience_scale: 1 }
    }
}

impl PlateauPolicy {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.patience == 0 || self.patience_scale == 0 {
            return Err(ScheduleError::InvalidArgument("patience and patience_scale must be at least 1".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(ScheduleError::InvalidArgument(format!(
                "decay factor {} outside (0, 1)",
                self.decay_factor
            )));
        }
        Ok(())
    }

    pub fn scaled(self, scale: usize) -> Self {
        Self { patience_scale: scale, ..self }
    }

    pub fn effective_patience(&self) -> usize {
        self.patience * self.patience_scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
    D,
}

impl Phase {
    /// Phase for a decay count; counts past three stay in D.
    pub fn from_decays(decays: usize) -> Self {
        match decays {
            0 => Phase::A,
            1 => Phase::B,
            2 => Phase::C,
            _ => Phase::D,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'A',
            Phase::B => 'B',
            Phase::C => 'C',
            Phase::D => 'D',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    Continue,
    Decay(f64),
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    pub best_loss: f64,
    pub epochs_since_improve: usize,
    pub decays_used: usize,
    pub current_lr: f64,
}

impl PlateauState {
    pub fn new(initial_lr: f64) -> Self {
        Self { best_loss: f64::INFINITY, epochs_since_improve: 0, decays_used: 0, current_lr: initial_lr }
    }

    pub fn phase(&self) -> Phase {
        Phase::from_decays(self.decays_used)
    }

    /// Records one epoch's validation loss.
    ///
    /// A strictly lower loss resets the counter. Once the counter reaches
    /// `patience × patience_scale` the rate decays (counter reset) while
    /// decays remain, otherwise training stops.
    pub fn observe(&mut self, policy: &PlateauPolicy, val_loss: f64) -> Action {
        if !self.tick(val_loss, policy.effective_patience()) {
            return Action::Continue;
        }
        if self.decays_used < policy.max_decays {
            self.decays_used += 1;
            self.current_lr *= policy.decay_factor;
            self.epochs_since_improve = 0;
            Action::Decay(self.current_lr)
        } else {
            Action::Stop
        }
    }

    /// Like [`observe`](Self::observe) but a plateau only reports `true` and
    /// resets the counter; the rate is left alone.
    pub fn observe_plateau(&mut self, policy: &PlateauPolicy, val_loss: f64) -> bool {
        let plateau = self.tick(val_loss, policy.effective_patience());
        if plateau {
            self.epochs_since_improve = 0;
        }
        plateau
    }

    fn tick(&mut self, val_loss: f64, patience: usize) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.epochs_since_improve = 0;
            false
        } else {
            self.epochs_since_improve += 1;
            self.epochs_since_improve >= patience
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpDecayPolicy {
    pub decay_per_period: f64,
    #[serde(default = "one")]
    pub period: usize,
}

impl ExpDecayPolicy {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.period == 0 {
            return Err(ScheduleError::InvalidArgument("decay period must be at least 1".into()));
        }
        if !(self.decay_per_period > 0.0 && self.decay_per_period <= 1.0) {
            return Err(ScheduleError::InvalidArgument(format!(
                "decay {} outside (0, 1]",
                self.decay_per_period
            )));
        }
        Ok(())
    }
}

/// `lr0 · decay^⌊epoch / period⌋`.
pub fn exp_decay_lr(epoch: usize, lr0: f64, policy: &ExpDecayPolicy) -> f64 {
    let steps = (epoch / policy.period) as i32;
    lr0 * policy.decay_per_period.powi(steps)
}

/// Plateau ladder, optionally multiplied by a per-epoch exponential decay.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub plateau: PlateauPolicy,
    #[serde(default)]
    pub exp_decay: Option<ExpDecayPolicy>,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        self.plateau.validate()?;
        if let Some(e) = &self.exp_decay {
            e.validate()?;
        }
        Ok(())
    }
}

/// Drives one run: plateau state plus the epoch-indexed exponential factor.
#[derive(Debug, Clone)]
pub struct Scheduler {
    policy: PlateauPolicy,
    exp: Option<ExpDecayPolicy>,
    state: PlateauState,
}

impl Scheduler {
    /// `scale` multiplies both the plateau patience and the exponential period.
    pub fn new(cfg: &ScheduleConfig, lr0: f64, scale: usize) -> Self {
        let exp = cfg.exp_decay.map(|e| ExpDecayPolicy { period: e.period * scale, ..e });
        Self { policy: cfg.plateau.scaled(scale), exp, state: PlateauState::new(lr0) }
    }

    /// Learning rate for a global epoch (0-based).
    pub fn lr(&self, epoch: usize) -> f64 {
        match &self.exp {
            Some(e) => exp_decay_lr(epoch, self.state.current_lr, e),
            None => self.state.current_lr,
        }
    }

    pub fn phase(&self) -> Phase {
        self.state.phase()
    }

    pub fn observe(&mut self, val_loss: f64) -> Action {
        self.state.observe(&self.policy, val_loss)
    }

    pub fn observe_plateau(&mut self, val_loss: f64) -> bool {
        self.state.observe_plateau(&self.policy, val_loss)
    }

    pub fn state(&self) -> &PlateauState {
        &self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(policy: &PlateauPolicy, losses: &[f64]) -> Vec<Action> {
        let mut s = PlateauState::new(1.0);
        losses.iter().map(|&l| s.observe(policy, l)).collect()
    }

    #[test]
    fn hand_traced_counter() {
        let p = PlateauPolicy { patience: 2, ..PlateauPolicy::default() };
        assert_eq!(
            run(&p, &[1.0, 0.9, 0.95, 0.92]),
            vec![Action::Continue, Action::Continue, Action::Continue, Action::Decay(0.25)]
        );
    }

    #[test]
    fn improving_stream_never_decays() {
        let p = PlateauPolicy { patience: 1, ..PlateauPolicy::default() };
        let losses: Vec<f64> = (0..500).map(|i| 10.0 - i as f64 * 0.01).collect();
        assert!(run(&p, &losses).iter().all(|a| *a == Action::Continue));
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let p = PlateauPolicy { patience: 1, ..PlateauPolicy::default() };
        assert_eq!(run(&p, &[0.5, 0.5]), vec![Action::Continue, Action::Decay(0.25)]);
    }

    #[test]
    fn terminal_phase_d_rate() {
        let p = PlateauPolicy { patience: 1, ..PlateauPolicy::default() };
        let mut s = PlateauState::new(5e-4);
        let mut last = None;
        for _ in 0..10 {
            match s.observe(&p, 1.0) {
                Action::Decay(lr) => last = Some(lr),
                Action::Stop => break,
                Action::Continue => {}
            }
        }
        assert!((last.unwrap() - 7.8125e-6).abs() < 1e-18);
        assert_eq!(s.phase(), Phase::D);
    }

    #[test]
    fn flat_stream_stops_at_scaled_epoch() {
        for (patience, scale, max_decays) in [(20, 1, 3), (20, 4, 3), (3, 2, 0), (5, 20, 2)] {
            let p = PlateauPolicy { patience, patience_scale: scale, max_decays, decay_factor: 0.25 };
            let mut s = PlateauState::new(1.0);
            let stop = (0..).find(|_| s.observe(&p, 1.0) == Action::Stop).unwrap();
            assert_eq!(stop, (max_decays + 1) * patience * scale);
            assert_eq!(s.decays_used, max_decays);
        }
    }

    #[test]
    fn plateau_without_decay_keeps_rate() {
        let p = PlateauPolicy { patience: 2, ..PlateauPolicy::default() };
        let mut s = PlateauState::new(0.1);
        let hits: Vec<bool> = [1.0, 1.0, 1.0, 1.0, 1.0].iter().map(|&l| s.observe_plateau(&p, l)).collect();
        assert_eq!(hits, vec![false, false, true, false, true]);
        assert_eq!(s.current_lr, 0.1);
    }

    #[test]
    fn exponential_decay() {
        let every = ExpDecayPolicy { decay_per_period: 0.99, period: 1 };
        assert_eq!(exp_decay_lr(0, 0.001, &every), 0.001);
        assert!((exp_decay_lr(100, 0.001, &every) - 3.660e-4).abs() < 1e-7);
        let four = ExpDecayPolicy { decay_per_period: 0.99, period: 4 };
        assert!((0..4).all(|e| exp_decay_lr(e, 0.001, &four) == 0.001));
        assert!(exp_decay_lr(4, 0.001, &four) < 0.001);
    }

    #[test]
    fn scheduler_scales_exp_period() {
        let cfg = ScheduleConfig {
            plateau: PlateauPolicy { max_decays: 0, patience: 80, ..PlateauPolicy::default() },
            exp_decay: Some(ExpDecayPolicy { decay_per_period: 0.99, period: 1 }),
        };
        let s = Scheduler::new(&cfg, 1e-3, 4);
        assert_eq!(s.lr(3), 1e-3);
        assert_eq!(s.lr(4), 1e-3 * 0.99);
    }

    #[test]
    fn invalid_policies() {
        assert!(PlateauPolicy { patience: 0, ..PlateauPolicy::default() }.validate().is_err());
        assert!(PlateauPolicy { decay_factor: 1.0, ..PlateauPolicy::default() }.validate().is_err());
        assert!(ExpDecayPolicy { decay_per_period: 0.9, period: 0 }.validate().is_err());
    }
}
