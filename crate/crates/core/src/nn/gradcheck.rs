use super::{loss, Batch, Mode, ModelState, NnError};

/// Compares backprop against central finite differences.
///
/// Runs in train mode (batch statistics) with dropout masks fixed to
/// identity. Returns the maximum over all parameter entries of
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(model: &ModelState, batch: &Batch, h: f64, l2_coeff: f64) -> Result<f64, NnError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(NnError::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = model.clone();
    probe.set_mode(Mode::Train);
    let fwd = probe.forward_without_dropout(&batch.features)?;
    let analytic = probe.backward(&fwd, &batch.labels, l2_coeff)?;

    let objective = |m: &ModelState| -> Result<f64, NnError> {
        let f = m.forward_without_dropout(&batch.features)?;
        loss(f.probs(), &batch.labels, m, l2_coeff)
    };

    let mut worst = 0.0f64;
    for (p, grad) in analytic.0.iter().enumerate() {
        for k in 0..grad.len() {
            let original = probe.parameters()[p].as_slice()[k];
            probe.parameters_mut()[p].as_mut_slice()[k] = original + h;
            let up = objective(&probe)?;
            probe.parameters_mut()[p].as_mut_slice()[k] = original - h;
            let down = objective(&probe)?;
            probe.parameters_mut()[p].as_mut_slice()[k] = original;

            let numeric = (up - down) / (2.0 * h);
            let a = grad.as_slice()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
