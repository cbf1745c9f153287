//! Supervised ANN training and Q-STDB: backpropagation through the unrolled
//! SNN with fake-quantized weights, surrogate spike gradients and learned
//! thresholds and leaks.

mod backward;
mod fit;
mod optim;

pub use backward::{ann_backward, apply_ste, qstdb_backward, SnnGrads};
pub use fit::{
    evaluate_ann, evaluate_snn, spike_traces, train_ann, train_snn, EpochLog, InferenceConfig, SnnEvaluation, TrainConfig,
    TrainOutcome,
};
pub use optim::{LrSchedule, OptimizerKind, OptimizerState};

use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 0.3;

/// Peak height of the triangular surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub gamma: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA }
    }
}

impl SurrogateConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return config(format!("surrogate gamma must be positive, got {gamma}"));
        }
        Ok(Self { gamma })
    }
}

#[inline]
pub(crate) fn surrogate(z: f64, gamma: f64) -> f64 {
    gamma * (1.0 - z.abs()).max(0.0)
}

/// `γ · max(0, 1 - |z|)` elementwise.
pub fn surrogate_grad(z: &Tensor, gamma: f64) -> Tensor {
    z.map(|v| surrogate(v, gamma))
}

/// Softmax cross-entropy and its gradient `p - y` with respect to the
/// output potentials.
pub fn loss_and_output_grad(u: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let (loss, g) = softmax_xent(u.data(), label)?;
    Ok((loss, Tensor::new(u.shape().to_vec(), g)?))
}

pub(crate) fn softmax_xent(u: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= u.len() {
        return input(format!("label {label} out of range for {} classes", u.len()));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return input("output potentials are not finite");
    }
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut g: Vec<f64> = exps.iter().map(|e| e / z).collect();
    // log p[label] without forming p, accurate when p[label] ~ 1
    let loss = -((u[label] - m) - z.ln());
    g[label] -= 1.0;
    Ok((loss, g))
}

/// `(p - y) ⊗ Σ_t o^t`: the classifier weight gradient from the presynaptic
/// outputs of every step (STE factor taken as one).
pub fn output_weight_grad(grad: &Tensor, presynaptic: &[Tensor], timesteps: usize) -> Result<Tensor> {
    use crate::error::Error;
    if presynaptic.len() != timesteps || timesteps == 0 {
        return Err(Error::Internal(format!(
            "spike record covers {} steps, expected {timesteps}",
            presynaptic.len()
        )));
    }
    let n = presynaptic[0].len();
    let mut counts = vec![0.0; n];
    for o in presynaptic {
        if o.len() != n {
            return Err(Error::Internal("presynaptic record widths differ between steps".into()));
        }
        for (c, v) in counts.iter_mut().zip(o.data()) {
            *c += v;
        }
    }
    let data = grad.data().iter().flat_map(|g| counts.iter().map(move |c| g * c)).collect();
    Tensor::new(vec![grad.len(), n], data)
}
