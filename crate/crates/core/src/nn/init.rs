use rand::{Rng, RngCore};

use super::{Matrix, NnError};

/// Glorot (Xavier) uniform initialisation of a `fan_in × fan_out` matrix.
///
/// Entries are drawn from `U[-L, L]` with `L = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: RngCore + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Matrix, NnError> {
    glorot_shaped(fan_in, fan_out, fan_in, fan_out, rng)
}

/// Glorot limits from `(fan_in, fan_out)` but an arbitrary output shape;
/// biases use this with a `1 × fan_out` shape.
pub(crate) fn glorot_shaped<R: RngCore + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<Matrix, NnError> {
    if fan_in == 0 || fan_out == 0 {
        return Err(NnError::InvalidArgument(format!(
            "glorot fans must be positive, got fan_in={fan_in}, fan_out={fan_out}"
        )));
    }
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Matrix::from_vec(rows, cols, data)
}
