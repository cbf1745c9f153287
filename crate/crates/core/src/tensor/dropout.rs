use rand::Rng;

use super::Tensor;
use crate::error::{config, Result};

/// Inverted-dropout multiplier per element: 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return config(format!("dropout rate must lie in [0, 1), got {rate}"));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Applies inverted dropout in training mode; identity in eval mode.
pub fn dropout_apply<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return config(format!("dropout rate must lie in [0, 1), got {rate}"));
    }
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.len(), rate, rng)?;
    let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Tensor::new(input.shape().to_vec(), data)
}
