//! ANN to SNN conversion: weight transfer and layer-by-layer threshold
//! calibration from the distribution of each layer's weighted input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::network::{Mode, Model, NetworkSpec, Simulator, SnnOptions};
use crate::neuron::{LifParams, MIN_THRESHOLD};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub batch_size: usize,
    pub timesteps: usize,
    pub percentile: f64,
    pub scale: f64,
    /// Cap on stored input samples per layer; beyond it a seeded reservoir
    /// sample stands in for the full distribution.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            timesteps: 100,
            percentile: 99.7,
            scale: 0.8,
            max_samples: 4_000_000,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return config(format!("percentile must lie in (0, 100], got {}", self.percentile));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return config(format!("threshold scale must be positive, got {}", self.scale));
        }
        if self.timesteps == 0 || self.batch_size == 0 || self.max_samples == 0 {
            return config("calibration batch size, timesteps and sample cap must be positive");
        }
        Ok(())
    }
}

/// One line of the calibration report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    pub layer: String,
    pub samples_seen: u64,
    pub percentile_value: f64,
    pub threshold: f64,
}

/// Copies the ANN weights into an SNN-mode model of the same architecture;
/// thresholds stay unset until calibration.
pub fn init_snn_from_ann(ann: &Model) -> Model {
    Model {
        spec: ann.spec.clone().with_mode(Mode::Snn),
        weights: ann.weights.clone(),
        lif: None,
    }
}

/// [`init_snn_from_ann`] onto an explicitly given SNN spec, which must match
/// the ANN layer for layer.
pub fn init_snn_from_ann_checked(ann: &Model, snn_spec: &NetworkSpec) -> Result<Model> {
    if !ann.spec.same_architecture(snn_spec) {
        return config("ANN and SNN architectures differ");
    }
    Ok(Model {
        spec: snn_spec.clone().with_mode(Mode::Snn),
        weights: ann.weights.clone(),
        lif: None,
    })
}

/// Linear-interpolation percentile of an unsorted sample (sorted in place).
pub fn percentile(values: &mut [f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return input("percentile of an empty sample");
    }
    values.sort_unstable_by(f64::total_cmp);
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(values[lo] + (rank - lo as f64) * (values[hi] - values[lo]))
}

/// Uniform sample of bounded size over a stream (Algorithm R).
struct Reservoir {
    cap: usize,
    seen: u64,
    items: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(cap: usize, seed: u64) -> Self {
        Self {
            cap,
            seen: 0,
            items: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn extend(&mut self, xs: &[f64]) {
        for &x in xs {
            self.seen += 1;
            if self.items.len() < self.cap {
                self.items.push(x);
            } else {
                let j = self.rng.random_range(0..self.seen);
                if (j as usize) < self.cap {
                    self.items[j as usize] = x;
                }
            }
        }
    }
}

/// Sequential threshold calibration with unit leaks. For each spiking layer
/// in order, the already-calibrated prefix runs for `timesteps` steps on the
/// batch; the layer's per-step weighted inputs over all neurons form the
/// sample whose percentile, times `scale`, becomes the threshold.
pub fn calibrate_thresholds(
    model: &Model,
    batch: &[Tensor],
    cfg: &CalibrationConfig,
) -> Result<(Vec<LifParams>, Vec<LayerCalibration>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return input("calibration batch is empty");
    }
    let spec = model.spec.clone().with_mode(Mode::Snn);
    let opts = SnnOptions::with_timesteps(cfg.timesteps);
    let mut lif: Vec<LifParams> = Vec::new();
    let mut report = Vec::new();
    for (k, &layer_idx) in spec.spiking_layers().iter().enumerate() {
        let mut res = Reservoir::new(cfg.max_samples, cfg.seed ^ k as u64);
        for chunk in batch.chunks(rayon::current_num_threads().max(1)) {
            let drives = chunk
                .par_iter()
                .map(|patch| {
                    let mut sim = Simulator::new::<ChaCha8Rng>(&spec, &model.weights, &lif, &opts, patch, None)?;
                    let mut all = Vec::new();
                    for _ in 0..cfg.timesteps {
                        if let Some(d) = sim.step(Some(layer_idx))? {
                            all.extend_from_slice(&d);
                        }
                    }
                    Ok(all)
                })
                .collect::<Result<Vec<_>>>()?;
            for d in &drives {
                res.extend(d);
            }
        }
        let seen = res.seen;
        let pv = percentile(&mut res.items, cfg.percentile)?;
        let mut v = pv * cfg.scale;
        let name = spec.layers[layer_idx].name.clone();
        if !(v > MIN_THRESHOLD) {
            log::warn!("layer {name}: calibrated threshold {v} clamped to {MIN_THRESHOLD}");
            v = MIN_THRESHOLD;
        }
        lif.push(LifParams { leak: 1.0, threshold: v });
        report.push(LayerCalibration {
            layer: name,
            samples_seen: seen,
            percentile_value: pv,
            threshold: v,
        });
    }
    Ok((lif, report))
}

/// Weight transfer followed by calibration on `batch`.
pub fn convert(ann: &Model, batch: &[Tensor], cfg: &CalibrationConfig) -> Result<(Model, Vec<LayerCalibration>)> {
    let mut snn = init_snn_from_ann(ann);
    let (lif, report) = calibrate_thresholds(&snn, batch, cfg)?;
    snn.lif = Some(lif);
    Ok((snn, report))
}
