use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Ratio between the lowest and the highest embedding frequency.
const FREQ_SPAN: f64 = 0.01;

/// Sinusoidal flow-time features `[sin(w0 t), cos(w0 t), sin(w1 t), cos(w1 t), ...]`.
///
/// Frequencies are geometrically spaced downward from `2π`:
/// `w_k = 2π · FREQ_SPAN^(k / (dim / 2))`.
pub fn sinusoidal_embed(tau: f64, dim: usize) -> Result<Tensor> {
    let mut out = vec![0.0; dim];
    sinusoidal_embed_into(tau, &mut out)?;
    Ok(Tensor::vector(out))
}

pub fn sinusoidal_embed_into(tau: f64, out: &mut [f64]) -> Result<()> {
    let dim = out.len();
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dim must be even, got {dim}")));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    let half = dim / 2;
    for k in 0..half {
        let w = std::f64::consts::TAU * FREQ_SPAN.powf(k as f64 / half as f64);
        out[2 * k] = (w * tau).sin();
        out[2 * k + 1] = (w * tau).cos();
    }
    Ok(())
}
