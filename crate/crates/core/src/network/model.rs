use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::forward::{ann_forward, snn_forward, SnnOptions};
use super::{Mode, NetworkSpec};
use crate::error::{config, Result};
use crate::neuron::LifParams;
use crate::tensor::Tensor;

/// A network spec with its weights and, once converted, per-layer LIF
/// parameters (one leak and one threshold per spiking layer).
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub weights: Vec<Tensor>,
    pub lif: Option<Vec<LifParams>>,
}

impl Model {
    /// He-normal initialization, `N(0, 2 / fan_in)`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = spec
            .layers
            .iter()
            .filter_map(|l| {
                let shape = l.weight_shape()?;
                let std = (2.0 / l.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Some(Tensor::new(shape, data).expect("shape matches length"))
            })
            .collect();
        Self {
            spec,
            weights,
            lif: None,
        }
    }

    pub fn zeros(spec: NetworkSpec) -> Self {
        let weights = spec.weight_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Self {
            spec,
            weights,
            lif: None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    pub fn lif_params(&self) -> Result<&[LifParams]> {
        match &self.lif {
            Some(p) => Ok(p),
            None => config("model has no thresholds; convert it before running it as an SNN"),
        }
    }

    pub fn ann_logits(&self, patch: &Tensor) -> Result<Tensor> {
        ann_forward(&self.spec, &self.weights, patch)
    }

    /// Output potentials after `timesteps` steps with full-precision weights.
    pub fn snn_potentials(&self, patch: &Tensor, timesteps: usize) -> Result<Tensor> {
        let spec = self.spec.clone().with_mode(Mode::Snn);
        let out = snn_forward(&spec, &self.weights, self.lif_params()?, patch, &SnnOptions::with_timesteps(timesteps))?;
        Ok(out.potentials)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_cnn3d;

    #[test]
    fn init_is_seeded_and_shaped() {
        let spec = build_cnn3d(16, 3).unwrap();
        let a = Model::init(spec.clone(), 7);
        let b = Model::init(spec.clone(), 7);
        let c = Model::init(spec.clone(), 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.parameter_count(), spec.parameter_count());
    }

    #[test]
    fn he_scale_is_plausible() {
        let spec = build_cnn3d(16, 3).unwrap();
        let m = Model::init(spec, 1);
        // layer 3: fan-in 40*27 = 1080, 84*1080 weights
        let w = &m.weights[2];
        let var = w.data().iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var * 1080.0 / 2.0 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn unconverted_model_refuses_snn_run() {
        let spec = build_cnn3d(16, 3).unwrap();
        let m = Model::init(spec.clone(), 1);
        let err = m.snn_potentials(&Tensor::zeros(&spec.input_shape()), 5).unwrap_err();
        assert_eq!(err.kind(), "config");
    }
}
