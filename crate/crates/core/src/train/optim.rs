use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Step decay: `initial · decay^k` where `k` counts the milestones already
/// passed. Epochs are 1-based; the rate changes at the first epoch after
/// each milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub milestones: Vec<usize>,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn ann_default() -> Self {
        Self {
            initial: 0.01,
            decay: 0.1,
            milestones: vec![60, 80, 90],
            epochs: 100,
        }
    }

    pub fn snn_default() -> Self {
        Self {
            initial: 1e-4,
            decay: 0.5,
            milestones: vec![60, 80, 90],
            epochs: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.decay > 0.0) || !self.initial.is_finite() {
            return config("learning rate and decay factor must be positive");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return config("decay epochs must be strictly increasing");
        }
        if self.epochs == 0 {
            return config("number of epochs must be positive");
        }
        Ok(())
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.initial * self.decay.powi(k as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd {
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter-group optimizer accumulators.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, group_sizes: &[usize]) -> Self {
        let zeros = || group_sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let v = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self { kind, step: 0, m: zeros(), v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Internal("optimizer group count mismatch".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::Internal(format!("optimizer group {i} shape mismatch")));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for ((w, &g), b) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
                        let g = g + weight_decay * *w;
                        *b = momentum * *b + g;
                        *w -= lr * *b;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((w, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
