use rand::{Rng, RngCore};

use super::init::glorot_shaped;
use super::layer::architecture_hash;
use super::{validate_specs, LayerKind, LayerSpec, Matrix, NnError, OptimizerConfig, OptimizerKind, OptimizerState};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `ln`.
pub const PROB_CLAMP: f64 = 1e-12;
/// Decay of the batch-norm running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.99;
/// Added to the batch variance before the square root.
pub const BN_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mini-batch of feature rows with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self, NnError> {
        if features.rows() == 0 {
            return Err(NnError::InvalidArgument("batch must hold at least one sample".into()));
        }
        if features.rows() != labels.len() {
            return Err(NnError::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum LayerParams {
    Stateless,
    Affine { weight: Matrix, bias: Matrix },
    BatchNorm { gamma: Matrix, beta: Matrix, running_mean: Matrix, running_var: Matrix },
}

#[derive(Debug, Clone)]
enum LayerCache {
    None,
    Dropout { mask: Matrix },
    BatchNorm { x_hat: Matrix, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
}

/// Everything a forward pass produced that backward needs.
#[derive(Debug, Clone)]
pub struct Forward {
    mode: Mode,
    inputs: Vec<Matrix>,
    caches: Vec<LayerCache>,
    probs: Matrix,
}

impl Forward {
    /// Output probabilities: `n×1` for a sigmoid head, `n×C` for softmax.
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Input to layer `i`; the final entry is the head's input (the logits).
    pub fn layer_input(&self, i: usize) -> &Matrix {
        &self.inputs[i]
    }

    pub fn into_probs(self) -> Matrix {
        self.probs
    }
}

/// Gradients in the same order and shapes as [`ModelState::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Matrix>);

/// Layer parameters, batch-norm running statistics, optimizer buffers and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    specs: Vec<LayerSpec>,
    layers: Vec<LayerParams>,
    opt: OptimizerState,
    mode: Mode,
}

impl ModelState {
    /// Glorot-initialises weights and biases; batch norm starts at
    /// `gamma = 1, beta = 0`, running mean 0 and running variance 1.
    pub fn new<R: RngCore + ?Sized>(
        specs: Vec<LayerSpec>,
        optimizer: OptimizerKind,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        validate_specs(&specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        for s in &specs {
            layers.push(match s.kind {
                LayerKind::Affine => LayerParams::Affine {
                    weight: glorot_shaped(s.in_dim, s.out_dim, s.in_dim, s.out_dim, rng)?,
                    bias: glorot_shaped(s.in_dim, s.out_dim, 1, s.out_dim, rng)?,
                },
                LayerKind::Batchnorm => LayerParams::BatchNorm {
                    gamma: Matrix::filled(1, s.out_dim, 1.0),
                    beta: Matrix::zeros(1, s.out_dim),
                    running_mean: Matrix::zeros(1, s.out_dim),
                    running_var: Matrix::filled(1, s.out_dim, 1.0),
                },
                _ => LayerParams::Stateless,
            });
        }
        let mut model = Self {
            specs,
            layers,
            opt: OptimizerState::Sgd { velocity: Vec::new() },
            mode: Mode::Train,
        };
        model.opt = OptimizerState::zeros(optimizer, &model.param_shapes());
        Ok(model)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn arch_hash(&self) -> u64 {
        architecture_hash(&self.specs)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    /// Number of classes the head distinguishes (2 for a sigmoid head).
    pub fn num_classes(&self) -> usize {
        let head = self.specs.last().expect("validated stack is non-empty");
        match head.kind {
            LayerKind::SigmoidHead => 2,
            _ => head.out_dim,
        }
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn optimizer_mut(&mut self) -> &mut OptimizerState {
        &mut self.opt
    }

    pub fn reset_optimizer(&mut self) {
        self.opt.reset();
    }

    /// Trainable tensors in layer order: affine `W, b`; batch norm `gamma, beta`.
    pub fn parameters(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::Affine { weight, bias } => out.extend([weight, bias]),
                LayerParams::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                LayerParams::Stateless => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::Affine { weight, bias } => out.extend([weight, bias]),
                LayerParams::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                LayerParams::Stateless => {}
            }
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.parameters().iter().map(|m| m.shape()).collect()
    }

    /// Batch-norm running statistics as `(mean, var)` pairs flattened in layer order.
    pub fn running_stats(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let LayerParams::BatchNorm { running_mean, running_var, .. } = l {
                out.extend([running_mean, running_var]);
            }
        }
        out
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let LayerParams::BatchNorm { running_mean, running_var, .. } = l {
                out.extend([running_mean, running_var]);
            }
        }
        out
    }

    /// Half the sum of squared affine weights (biases excluded).
    pub fn l2_penalty(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| match l {
                LayerParams::Affine { weight, .. } => 0.5 * weight.sum_squares(),
                _ => 0.0,
            })
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().chain(self.running_stats().iter()).all(|m| m.is_finite())
            && self.opt.buffers().iter().all(|m| m.is_finite())
    }

    /// Forward pass in the model's current mode. In train mode dropout masks
    /// are drawn from `rng`; in eval mode `rng` is untouched.
    pub fn forward<R: RngCore + ?Sized>(&self, x: &Matrix, rng: &mut R) -> Result<Forward, NnError> {
        self.run(x, self.mode, Some(&mut RngAdapter(rng)))
    }

    /// Forward pass in the current mode with every dropout mask fixed to identity.
    pub fn forward_without_dropout(&self, x: &Matrix) -> Result<Forward, NnError> {
        self.run(x, self.mode, None)
    }

    /// Eval-mode probabilities regardless of the stored mode.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix, NnError> {
        Ok(self.run(x, Mode::Eval, None)?.probs)
    }

    fn run(
        &self,
        x: &Matrix,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward, NnError> {
        if x.cols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "batch has {} features, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let n = x.rows();
        let mut inputs = Vec::with_capacity(self.specs.len() + 1);
        let mut caches = Vec::with_capacity(self.specs.len());
        let mut current = x.clone();
        for (spec, params) in self.specs.iter().zip(&self.layers) {
            let (next, cache) = match (spec.kind, params) {
                (LayerKind::Affine, LayerParams::Affine { weight, bias }) => {
                    let mut out = current.matmul(weight)?;
                    out.add_row_broadcast(bias)?;
                    (out, LayerCache::None)
                }
                (LayerKind::Relu, _) => (current.map(|v| v.max(0.0)), LayerCache::None),
                (LayerKind::Dropout, _) => match (mode, rng.as_deref_mut()) {
                    (Mode::Train, Some(r)) if spec.dropout_rate > 0.0 => {
                        let keep = 1.0 - spec.dropout_rate;
                        let mask_data = (0..current.len())
                            .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let mask = Matrix::from_vec(current.rows(), current.cols(), mask_data)?;
                        let mut out = current.clone();
                        for (o, m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                            *o *= m;
                        }
                        (out, LayerCache::Dropout { mask })
                    }
                    _ => (current.clone(), LayerCache::None),
                },
                (
                    LayerKind::Batchnorm,
                    LayerParams::BatchNorm { gamma, beta, running_mean, running_var },
                ) => match mode {
                    Mode::Train => {
                        let d = current.cols();
                        let mut mean = vec![0.0; d];
                        for r in 0..n {
                            for (m, v) in mean.iter_mut().zip(current.row(r)) {
                                *m += v;
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= n as f64);
                        let mut var = vec![0.0; d];
                        for r in 0..n {
                            for ((s, v), m) in var.iter_mut().zip(current.row(r)).zip(&mean) {
                                *s += (v - m) * (v - m);
                            }
                        }
                        var.iter_mut().for_each(|s| *s /= n as f64);
                        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
                        let mut x_hat = Matrix::zeros(n, d);
                        let mut out = Matrix::zeros(n, d);
                        for r in 0..n {
                            for c in 0..d {
                                let xh = (current.get(r, c) - mean[c]) * inv_std[c];
                                x_hat.set(r, c, xh);
                                out.set(r, c, gamma.get(0, c) * xh + beta.get(0, c));
                            }
                        }
                        (out, LayerCache::BatchNorm { x_hat, inv_std, mean, var })
                    }
                    Mode::Eval => {
                        let d = current.cols();
                        let mut out = Matrix::zeros(n, d);
                        for c in 0..d {
                            let inv = 1.0 / (running_var.get(0, c) + BN_EPSILON).sqrt();
                            let (g, b, m) = (gamma.get(0, c), beta.get(0, c), running_mean.get(0, c));
                            for r in 0..n {
                                out.set(r, c, g * (current.get(r, c) - m) * inv + b);
                            }
                        }
                        (out, LayerCache::None)
                    }
                },
                (LayerKind::SigmoidHead, _) => (current.map(sigmoid), LayerCache::None),
                (LayerKind::SoftmaxHead, _) => (softmax_rows(&current), LayerCache::None),
                (kind, _) => {
                    return Err(NnError::State(format!("parameters missing for {kind:?} layer")))
                }
            };
            inputs.push(std::mem::replace(&mut current, next));
            caches.push(cache);
        }
        if !current.is_finite() {
            return Err(NnError::NonFinite);
        }
        Ok(Forward { mode, inputs, caches, probs: current })
    }

    /// Analytic gradients of `loss(probs, labels, self, l2_coeff)`.
    ///
    /// The head and cross-entropy are differentiated jointly, giving
    /// `(p - onehot) / n` at the logits for both head kinds.
    pub fn backward(&self, fwd: &Forward, labels: &[usize], l2_coeff: f64) -> Result<Gradients, NnError> {
        if fwd.mode != Mode::Train || fwd.caches.len() != self.specs.len() {
            return Err(NnError::State("backward requires a train-mode forward pass of this model".into()));
        }
        let n = fwd.probs.rows();
        check_labels(labels, n, self.num_classes())?;
        let inv_n = 1.0 / n as f64;

        let mut delta = fwd.probs.clone();
        if delta.cols() == 1 {
            for (d, &y) in delta.as_mut_slice().iter_mut().zip(labels) {
                *d = (*d - y as f64) * inv_n;
            }
        } else {
            for (r, &y) in labels.iter().enumerate() {
                let row = delta.row_mut(r);
                row[y] -= 1.0;
                row.iter_mut().for_each(|v| *v *= inv_n);
            }
        }

        // Collected back to front, reversed at the end.
        let mut grads_rev: Vec<Matrix> = Vec::new();
        let head = self.specs.len() - 1;
        for i in (0..head).rev() {
            let input = &fwd.inputs[i];
            match (&self.layers[i], &fwd.caches[i]) {
                (LayerParams::Affine { weight, .. }, _) => {
                    let mut dw = input.t_matmul(&delta)?;
                    if l2_coeff != 0.0 {
                        for (g, w) in dw.as_mut_slice().iter_mut().zip(weight.as_slice()) {
                            *g += l2_coeff * w;
                        }
                    }
                    let db = delta.column_sums();
                    grads_rev.push(db);
                    grads_rev.push(dw);
                    if i > 0 {
                        delta = delta.matmul_t(weight)?;
                    }
                }
                (LayerParams::BatchNorm { gamma, .. }, LayerCache::BatchNorm { x_hat, inv_std, .. }) => {
                    let d = delta.cols();
                    let mut dgamma = Matrix::zeros(1, d);
                    let mut dbeta = Matrix::zeros(1, d);
                    let mut sum_dxh = vec![0.0; d];
                    let mut sum_dxh_xh = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            let g = delta.get(r, c);
                            let xh = x_hat.get(r, c);
                            dgamma.as_mut_slice()[c] += g * xh;
                            dbeta.as_mut_slice()[c] += g;
                            let dxh = g * gamma.get(0, c);
                            sum_dxh[c] += dxh;
                            sum_dxh_xh[c] += dxh * xh;
                        }
                    }
                    let mut dx = Matrix::zeros(n, d);
                    for r in 0..n {
                        for c in 0..d {
                            let dxh = delta.get(r, c) * gamma.get(0, c);
                            let v = inv_std[c] * inv_n
                                * (n as f64 * dxh - sum_dxh[c] - x_hat.get(r, c) * sum_dxh_xh[c]);
                            dx.set(r, c, v);
                        }
                    }
                    grads_rev.push(dbeta);
                    grads_rev.push(dgamma);
                    delta = dx;
                }
                (LayerParams::BatchNorm { .. }, _) => {
                    return Err(NnError::State("batch-norm cache missing".into()));
                }
                (LayerParams::Stateless, cache) => match self.specs[i].kind {
                    LayerKind::Relu => {
                        for (d, &x) in delta.as_mut_slice().iter_mut().zip(input.as_slice()) {
                            if x <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    LayerKind::Dropout => {
                        if let LayerCache::Dropout { mask } = cache {
                            for (d, m) in delta.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                                *d *= m;
                            }
                        }
                    }
                    kind => return Err(NnError::State(format!("unexpected {kind:?} below the head"))),
                },
            }
        }
        grads_rev.reverse();
        Ok(Gradients(grads_rev))
    }

    /// Folds the batch statistics of a train-mode pass into the running averages.
    pub fn commit_batch_stats(&mut self, fwd: &Forward) {
        if fwd.mode != Mode::Train {
            return;
        }
        for (layer, cache) in self.layers.iter_mut().zip(&fwd.caches) {
            if let (
                LayerParams::BatchNorm { running_mean, running_var, .. },
                LayerCache::BatchNorm { mean, var, .. },
            ) = (layer, cache)
            {
                for (rm, m) in running_mean.as_mut_slice().iter_mut().zip(mean) {
                    *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * m;
                }
                for (rv, v) in running_var.as_mut_slice().iter_mut().zip(var) {
                    *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * v;
                }
            }
        }
    }

    pub fn opt_step(&mut self, grads: &Gradients, cfg: &OptimizerConfig, lr: f64) -> Result<(), NnError> {
        let mut opt = std::mem::replace(&mut self.opt, OptimizerState::Sgd { velocity: Vec::new() });
        let result = {
            let mut params = self.parameters_mut();
            opt.apply(&mut params, &grads.0, cfg, lr)
        };
        self.opt = opt;
        result
    }

    /// Forward, backward, running-stat update and one optimizer step.
    /// Returns the regularised batch loss before the update.
    pub fn train_step<R: RngCore + ?Sized>(
        &mut self,
        batch: &Batch,
        cfg: &OptimizerConfig,
        lr: f64,
        rng: &mut R,
    ) -> Result<f64, NnError> {
        if self.mode != Mode::Train {
            return Err(NnError::State("train_step requires train mode".into()));
        }
        let fwd = self.forward(&batch.features, rng)?;
        let value = loss(fwd.probs(), &batch.labels, self, cfg.l2_coeff)?;
        let grads = self.backward(&fwd, &batch.labels, cfg.l2_coeff)?;
        self.commit_batch_stats(&fwd);
        self.opt_step(&grads, cfg, lr)?;
        Ok(value)
    }
}

struct RngAdapter<'a, R: RngCore + ?Sized>(&'a mut R);

impl<R: RngCore + ?Sized> RngCore for RngAdapter<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<(), NnError> {
    if labels.len() != n {
        return Err(NnError::Shape(format!("{n} predictions but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(NnError::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy. A single-column `probs` is read as `P(class 1)`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<f64, NnError> {
    let n = probs.rows();
    let classes = if probs.cols() == 1 { 2 } else { probs.cols() };
    check_labels(labels, n, classes)?;
    let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let total: f64 = if probs.cols() == 1 {
        probs
            .as_slice()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| if y == 1 { -clamp(p).ln() } else { -clamp(1.0 - p).ln() })
            .sum()
    } else {
        labels.iter().enumerate().map(|(r, &y)| -clamp(probs.get(r, y)).ln()).sum()
    };
    Ok(total / n as f64)
}

/// Cross-entropy plus `l2_coeff · ½·Σ W²` over affine weights.
pub fn loss(probs: &Matrix, labels: &[usize], model: &ModelState, l2_coeff: f64) -> Result<f64, NnError> {
    let ce = cross_entropy(probs, labels)?;
    Ok(if l2_coeff == 0.0 { ce } else { ce + l2_coeff * model.l2_penalty() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn set_affine(model: &mut ModelState, layer_param: usize, values: &[f64]) {
        model.parameters_mut()[layer_param].as_mut_slice().copy_from_slice(values);
    }

    #[test]
    fn zero_affine_into_sigmoid_is_half() {
        let mut m = ModelState::new(
            vec![LayerSpec::affine(3, 1), LayerSpec::sigmoid_head()],
            OptimizerKind::SgdMomentum,
            &mut rng(0),
        )
        .unwrap();
        for p in m.parameters_mut() {
            p.scale(0.0);
        }
        let x = Matrix::from_rows(&[vec![1.0, -4.0, 9.0], vec![0.3, 0.2, 0.1]]).unwrap();
        let p = m.forward(&x, &mut rng(1)).unwrap().into_probs();
        assert!(p.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let m = ModelState::new(vec![LayerSpec::softmax_head(3)], OptimizerKind::SgdMomentum, &mut rng(0))
            .unwrap();
        let p = m.predict(&Matrix::zeros(1, 3)).unwrap();
        for &v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_two_layer_forward() {
        let mut m = ModelState::new(
            vec![
                LayerSpec::affine(2, 2),
                LayerSpec::relu(2),
                LayerSpec::affine(2, 1),
                LayerSpec::sigmoid_head(),
            ],
            OptimizerKind::SgdMomentum,
            &mut rng(0),
        )
        .unwrap();
        set_affine(&mut m, 0, &[1.0, 0.0, 0.0, 1.0]);
        set_affine(&mut m, 1, &[0.0, 0.0]);
        set_affine(&mut m, 2, &[1.0, -1.0]);
        set_affine(&mut m, 3, &[0.0]);
        let p = m.predict(&Matrix::row_vector(&[1.0, 2.0]).unwrap()).unwrap();
        let expected = 1.0 / (1.0 + 1f64.exp());
        assert!((p.get(0, 0) - expected).abs() < 1e-15);
        assert!((p.get(0, 0) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = ModelState::new(vec![LayerSpec::affine(3, 1), LayerSpec::sigmoid_head()], OptimizerKind::Adam, &mut rng(0))
            .unwrap();
        assert!(matches!(m.predict(&Matrix::zeros(2, 4)), Err(NnError::Shape(_))));
    }

    #[test]
    fn loss_closed_forms() {
        let half = Matrix::filled(1, 1, 0.5);
        assert!((cross_entropy(&half, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let perfect = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        assert!(cross_entropy(&perfect, &[1, 0]).unwrap() <= 1e-11);

        let pair = Matrix::from_vec(2, 1, vec![0.9, 0.1]).unwrap();
        let v = cross_entropy(&pair, &[1, 0]).unwrap();
        assert!((v - 0.105361).abs() < 1e-6);
        assert!((v + 0.9f64.ln()).abs() < 1e-15);

        // Opposing certainty stays finite thanks to the clamp.
        let wrong = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let v = cross_entropy(&wrong, &[1]).unwrap();
        assert!(v.is_finite() && (v + PROB_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn l2_term_adds_half_sum_of_squares() {
        let mut m = ModelState::new(vec![LayerSpec::affine(2, 1), LayerSpec::sigmoid_head()], OptimizerKind::SgdMomentum, &mut rng(0))
            .unwrap();
        set_affine(&mut m, 0, &[3.0, 4.0]);
        set_affine(&mut m, 1, &[100.0]);
        let probs = Matrix::filled(1, 1, 0.5);
        let v = loss(&probs, &[1], &m, 0.1).unwrap();
        assert!((v - (std::f64::consts::LN_2 + 0.1 * 12.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_input_kills_weight_gradient() {
        let m = ModelState::new(vec![LayerSpec::affine(3, 1), LayerSpec::sigmoid_head()], OptimizerKind::SgdMomentum, &mut rng(4))
            .unwrap();
        let x = Matrix::zeros(4, 3);
        let labels = [1, 0, 1, 1];
        let fwd = m.forward(&x, &mut rng(0)).unwrap();
        let g = m.backward(&fwd, &labels, 0.0).unwrap();
        assert!(g.0[0].as_slice().iter().all(|&v| v == 0.0));
        let p = fwd.probs().as_slice();
        let head_err: f64 = p.iter().zip(&labels).map(|(p, &y)| p - y as f64).sum::<f64>() / 4.0;
        assert!((g.0[1].get(0, 0) - head_err).abs() < 1e-15);
    }

    #[test]
    fn l2_gradient_when_labels_matched() {
        // Huge logits saturate the sigmoid so the data term vanishes.
        let mut m = ModelState::new(vec![LayerSpec::affine(1, 1), LayerSpec::sigmoid_head()], OptimizerKind::SgdMomentum, &mut rng(0))
            .unwrap();
        set_affine(&mut m, 0, &[0.7]);
        set_affine(&mut m, 1, &[0.0]);
        let x = Matrix::from_vec(2, 1, vec![200.0, -200.0]).unwrap();
        let fwd = m.forward(&x, &mut rng(0)).unwrap();
        let g = m.backward(&fwd, &[1, 0], 0.01).unwrap();
        assert!((g.0[0].get(0, 0) - 0.01 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_train_forward() {
        let mut m = ModelState::new(vec![LayerSpec::affine(2, 1), LayerSpec::sigmoid_head()], OptimizerKind::SgdMomentum, &mut rng(0))
            .unwrap();
        m.set_mode(Mode::Eval);
        let fwd = m.forward(&Matrix::zeros(1, 2), &mut rng(0)).unwrap();
        assert!(matches!(m.backward(&fwd, &[0], 0.0), Err(NnError::State(_))));
    }

    #[test]
    fn eval_forward_is_pure_and_skips_dropout() {
        let mut m = ModelState::new(
            vec![
                LayerSpec::affine(3, 8),
                LayerSpec::batchnorm(8),
                LayerSpec::relu(8),
                LayerSpec::dropout(8, 0.5),
                LayerSpec::affine(8, 4),
                LayerSpec::softmax_head(4),
            ],
            OptimizerKind::Adam,
            &mut rng(9),
        )
        .unwrap();
        m.set_mode(Mode::Eval);
        let x = Matrix::from_rows(&[vec![0.1, -0.5, 2.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let a = m.forward(&x, &mut rng(1)).unwrap().into_probs();
        let b = m.forward(&x, &mut rng(2)).unwrap().into_probs();
        assert_eq!(a, b);
        for r in 0..a.rows() {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn train_dropout_is_seed_deterministic() {
        let m = ModelState::new(
            vec![LayerSpec::affine(3, 16), LayerSpec::dropout(16, 0.5), LayerSpec::affine(16, 1), LayerSpec::sigmoid_head()],
            OptimizerKind::SgdMomentum,
            &mut rng(2),
        )
        .unwrap();
        let x = Matrix::filled(5, 3, 0.3);
        let a = m.forward(&x, &mut rng(77)).unwrap().into_probs();
        let b = m.forward(&x, &mut rng(77)).unwrap().into_probs();
        let c = m.forward(&x, &mut rng(78)).unwrap().into_probs();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn batchnorm_standardises_batch() {
        let m = ModelState::new(
            vec![LayerSpec::batchnorm(3), LayerSpec::affine(3, 1), LayerSpec::sigmoid_head()],
            OptimizerKind::SgdMomentum,
            &mut rng(0),
        )
        .unwrap();
        let mut r = rng(5);
        let data: Vec<f64> = (0..64 * 3).map(|i| r.random_range(-2.0..2.0) * (1 + i % 3) as f64 + 7.0).collect();
        let x = Matrix::from_vec(64, 3, data).unwrap();
        let fwd = m.forward(&x, &mut r).unwrap();
        // gamma = 1, beta = 0 so the layer output is x̂ itself.
        let out = fwd.layer_input(1);
        for c in 0..3 {
            let col: Vec<f64> = (0..64).map(|i| out.get(i, c)).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut m = ModelState::new(
            vec![LayerSpec::batchnorm(1), LayerSpec::affine(1, 1), LayerSpec::sigmoid_head()],
            OptimizerKind::SgdMomentum,
            &mut rng(0),
        )
        .unwrap();
        let x = Matrix::from_vec(2, 1, vec![4.0, 6.0]).unwrap();
        let fwd = m.forward(&x, &mut rng(0)).unwrap();
        m.commit_batch_stats(&fwd);
        let stats = m.running_stats();
        assert!((stats[0].get(0, 0) - 0.05).abs() < 1e-15);
        assert!((stats[1].get(0, 0) - (0.99 + 0.01 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn gradient_step_reduces_quadratic_toy_loss() {
        // Full batch, mu = 0, no L2, small lr.
        let mut m = ModelState::new(vec![LayerSpec::affine(2, 1), LayerSpec::sigmoid_head()], OptimizerKind::SgdMomentum, &mut rng(3))
            .unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 0.5], vec![-1.0, 0.2], vec![0.3, -0.8], vec![-0.4, -0.4]]).unwrap();
        let batch = Batch::new(x, vec![1, 0, 1, 0]).unwrap();
        let cfg = OptimizerConfig { momentum: 0.0, ..OptimizerConfig::sgd_momentum() };
        let before = m.train_step(&batch, &cfg, 1e-3, &mut rng(0)).unwrap();
        let after = loss(&m.predict(&batch.features).unwrap(), &batch.labels, &m, 0.0).unwrap();
        assert!(after < before);
    }
}
