use serde::{Deserialize, Serialize};

use super::{Matrix, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub l2_coeff: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    /// SGD with momentum 0.9 and learning rate 5e-4.
    pub fn sgd_momentum() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: 5e-4,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            l2_coeff: 0.0,
        }
    }

    /// Adam at 1e-3 with an L2 coefficient of 1e-4.
    pub fn adam() -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate: 1e-3, l2_coeff: 1e-4, ..Self::sgd_momentum() }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return Err(NnError::InvalidArgument(format!(
                "l2 coefficient must be non-negative, got {}",
                self.l2_coeff
            )));
        }
        match self.kind {
            OptimizerKind::SgdMomentum if !(0.0..1.0).contains(&self.momentum) => Err(
                NnError::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)),
            ),
            OptimizerKind::Adam
                if !((0.0..1.0).contains(&self.beta1)
                    && (0.0..1.0).contains(&self.beta2)
                    && self.epsilon > 0.0) =>
            {
                Err(NnError::InvalidArgument("adam betas must lie in [0, 1) and epsilon > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-parameter optimizer buffers, shaped like the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd { velocity: Vec<Matrix> },
    Adam { first: Vec<Matrix>, second: Vec<Matrix>, step: u64 },
}

impl OptimizerState {
    pub fn zeros(kind: OptimizerKind, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect::<Vec<_>>();
        match kind {
            OptimizerKind::SgdMomentum => OptimizerState::Sgd { velocity: zeros() },
            OptimizerKind::Adam => OptimizerState::Adam { first: zeros(), second: zeros(), step: 0 },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Sgd { .. } => OptimizerKind::SgdMomentum,
            OptimizerState::Adam { .. } => OptimizerKind::Adam,
        }
    }

    pub fn reset(&mut self) {
        match self {
            OptimizerState::Sgd { velocity } => velocity.iter_mut().for_each(|m| m.scale(0.0)),
            OptimizerState::Adam { first, second, step } => {
                first.iter_mut().chain(second.iter_mut()).for_each(|m| m.scale(0.0));
                *step = 0;
            }
        }
    }

    /// Buffers in wire order: velocity, or first moments then second moments.
    pub fn buffers(&self) -> Vec<&Matrix> {
        match self {
            OptimizerState::Sgd { velocity } => velocity.iter().collect(),
            OptimizerState::Adam { first, second, .. } => first.iter().chain(second).collect(),
        }
    }

    pub(crate) fn buffers_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            OptimizerState::Sgd { velocity } => velocity.iter_mut().collect(),
            OptimizerState::Adam { first, second, .. } => first.iter_mut().chain(second.iter_mut()).collect(),
        }
    }

    /// Applies one update in place.
    ///
    /// SGD: `v ← μ·v − lr·g; w ← w + v`. Adam: bias-corrected moments with
    /// `w ← w − lr·m̂ / (sqrt(v̂) + ε)`.
    pub(crate) fn apply(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[Matrix],
        cfg: &OptimizerConfig,
        lr: f64,
    ) -> Result<(), NnError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NnError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if cfg.kind != self.kind() {
            return Err(NnError::State(format!(
                "optimizer state is {:?} but config asks for {:?}",
                self.kind(),
                cfg.kind
            )));
        }
        if params.len() != grads.len() {
            return Err(NnError::Shape(format!("{} params but {} grads", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NnError::Shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        match self {
            OptimizerState::Sgd { velocity } => {
                let mu = cfg.momentum;
                for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    for ((w, &gi), vi) in
                        p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(v.as_mut_slice())
                    {
                        *vi = mu * *vi - lr * gi;
                        *w += *vi;
                    }
                }
            }
            OptimizerState::Adam { first, second, step } => {
                *step += 1;
                let t = *step as i32;
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((p, g), m), v) in
                    params.iter_mut().zip(grads).zip(first.iter_mut()).zip(second.iter_mut())
                {
                    for (((w, &gi), mi), vi) in p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(m.as_mut_slice())
                        .zip(v.as_mut_slice())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
                    }
                }
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(())
    }
}
