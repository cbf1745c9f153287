//! Operation counts and compute energy of the ANN and its spiking
//! counterpart.
//!
//! An ANN layer costs its full FLOP count in multiply-accumulates. In the
//! SNN the first layer sees the analog input and still needs MACs (once,
//! since the input is constant over time), while every later layer only
//! accumulates on incoming spikes: its FLOPs scale with `ζ`, the average
//! number of spikes each of its input neurons emits over the whole run.

use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::network::{LayerKind, LayerSpec, Mode, NetworkSpec, SnnOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Mac,
    Ac,
}

/// How energies at widths other than 32 bits are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Measured 32- and 6-bit values verbatim, power law elsewhere.
    Table,
    /// Power law from the 32-bit values at every other width.
    PowerLaw,
}

/// Energy per operation in picojoules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConstants {
    pub mac_32: f64,
    pub ac_32: f64,
    pub mac_6: f64,
    pub ac_6: f64,
    pub mac_exponent: f64,
    pub ac_exponent: f64,
    pub anchors: AnchorMode,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            mac_32: 3.2,
            ac_32: 0.1,
            mac_6: 0.26,
            ac_6: 0.02,
            mac_exponent: 1.25,
            ac_exponent: 1.0,
            anchors: AnchorMode::Table,
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mac_32, self.ac_32, self.mac_6, self.ac_6, self.mac_exponent, self.ac_exponent];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return config("energy constants and exponents must be positive");
        }
        Ok(())
    }

    pub fn op_energy(&self, kind: OpKind, bits: u32) -> Result<f64> {
        if bits < 2 {
            return config(format!("bit width must be at least 2, got {bits}"));
        }
        let (e32, e6, p) = match kind {
            OpKind::Mac => (self.mac_32, self.mac_6, self.mac_exponent),
            OpKind::Ac => (self.ac_32, self.ac_6, self.ac_exponent),
        };
        Ok(match (bits, self.anchors) {
            (32, _) => e32,
            (6, AnchorMode::Table) => e6,
            _ => e32 * (bits as f64 / 32.0).powf(p),
        })
    }
}

/// Full (dense) FLOP count of a layer; zero for pooling and dropout.
pub fn flops_ann(layer: &LayerSpec) -> u64 {
    let o = &layer.output_shape;
    match &layer.kind {
        LayerKind::Conv3d { geometry: g } => {
            let [kz, kx, ky] = g.kernel;
            (kx * ky * kz * o[1] * o[2] * o[3] * g.out_channels * g.in_channels) as u64
        }
        LayerKind::Conv2d { geometry: g } => {
            (g.kernel[1] * g.kernel[2] * o[1] * o[2] * g.out_channels * g.in_channels) as u64
        }
        LayerKind::Linear {
            in_features,
            out_features,
        }
        | LayerKind::Classifier {
            in_features,
            out_features,
        } => (in_features * out_features) as u64,
        LayerKind::AvgPool2d { .. } | LayerKind::Dropout { .. } => 0,
    }
}

/// FLOPs of a layer in the given mode; SNN mode needs the input activity.
pub fn flops_layer(layer: &LayerSpec, mode: Mode, zeta: Option<f64>) -> Result<f64> {
    let f = flops_ann(layer) as f64;
    match mode {
        Mode::Ann => Ok(f),
        Mode::Snn => match zeta {
            Some(z) => Ok(f * z),
            None => input(format!("layer {} needs a spiking activity in snn mode", layer.name)),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerActivity {
    pub layer: String,
    pub neurons: usize,
    /// Average spikes per neuron over all `timesteps`.
    pub zeta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub timesteps: usize,
    pub samples: usize,
    pub layers: Vec<LayerActivity>,
}

impl ActivityProfile {
    /// From spike totals accumulated over `samples` runs.
    pub fn from_totals(spec: &NetworkSpec, totals: &[f64], samples: usize, timesteps: usize) -> Result<Self> {
        let spiking = spec.spiking_layers();
        if samples == 0 {
            return input("activity needs at least one recorded sample");
        }
        if totals.len() != spiking.len() {
            return input(format!("{} spike totals for {} spiking layers", totals.len(), spiking.len()));
        }
        let layers = spiking
            .iter()
            .zip(totals)
            .map(|(&i, &t)| {
                let l = &spec.layers[i];
                let n = l.output_len();
                LayerActivity {
                    layer: l.name.clone(),
                    neurons: n,
                    zeta: t / (n * samples) as f64,
                }
            })
            .collect();
        Ok(Self {
            timesteps,
            samples,
            layers,
        })
    }

    pub fn zeta(&self, layer: &str) -> Option<f64> {
        self.layers.iter().find(|a| a.layer == layer).map(|a| a.zeta)
    }
}

/// Average spike count per neuron of every spiking layer over a set of runs.
pub fn measure_activity(spec: &NetworkSpec, runs: &[SnnOutput], timesteps: usize) -> Result<ActivityProfile> {
    if runs.is_empty() {
        return input("activity needs at least one recorded sample");
    }
    let mut totals = vec![0.0; spec.spiking_layers().len()];
    for r in runs {
        if r.spike_totals.len() != totals.len() {
            return input("spike record does not match the network");
        }
        totals.iter_mut().zip(&r.spike_totals).for_each(|(a, b)| *a += b);
    }
    ActivityProfile::from_totals(spec, &totals, runs.len(), timesteps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub f_ann: u64,
    pub f_snn: f64,
    /// Activity of the spiking layer feeding this one; `None` for the first
    /// layer, which is driven by the analog input.
    pub zeta: Option<f64>,
    pub op_kind: OpKind,
    pub e_ann_pj: f64,
    pub e_snn_pj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRatio {
    pub ann_bits: u32,
    pub snn_bits: u32,
    pub e_ann_pj: f64,
    pub e_snn_pj: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub ann_bits: u32,
    pub snn_bits: u32,
    pub layers: Vec<LayerEnergy>,
    pub e_ann_pj: f64,
    pub e_snn_pj: f64,
    /// `E^ANN / E^SNN` with the ANN at 32 bits and at the SNN's width.
    pub ratios: Vec<EnergyRatio>,
    /// E^SNN when the classifier is charged as full MACs instead of
    /// spike-driven accumulates.
    pub e_snn_classifier_mac_pj: f64,
    pub constants: EnergyConstants,
}

fn total_ann(spec: &NetworkSpec, e_mac: f64) -> f64 {
    spec.layers.iter().map(|l| flops_ann(l) as f64 * e_mac).sum()
}

/// Per-layer and total energies. Layer `l ≥ 2` uses the activity of the
/// closest spiking layer before it.
pub fn energy_totals(
    spec: &NetworkSpec,
    profile: &ActivityProfile,
    ann_bits: u32,
    snn_bits: u32,
    constants: &EnergyConstants,
) -> Result<EnergyReport> {
    constants.validate()?;
    let mac_ann = constants.op_energy(OpKind::Mac, ann_bits)?;
    let mac_snn = constants.op_energy(OpKind::Mac, snn_bits)?;
    let ac_snn = constants.op_energy(OpKind::Ac, snn_bits)?;
    let mut layers = Vec::new();
    let mut feeding: Option<f64> = None;
    let mut first = true;
    let mut cls_extra = 0.0;
    for l in &spec.layers {
        if !l.kind.is_weighted() {
            continue;
        }
        let f_ann = flops_ann(l);
        let e_ann = f_ann as f64 * mac_ann;
        let entry = if first {
            first = false;
            LayerEnergy {
                name: l.name.clone(),
                f_ann,
                f_snn: f_ann as f64,
                zeta: None,
                op_kind: OpKind::Mac,
                e_ann_pj: e_ann,
                e_snn_pj: f_ann as f64 * mac_snn,
            }
        } else {
            let Some(z) = feeding else {
                return input(format!("activity profile has no entry feeding layer {}", l.name));
            };
            let f_snn = flops_layer(l, Mode::Snn, Some(z))?;
            let e = f_snn * ac_snn;
            if matches!(l.kind, LayerKind::Classifier { .. }) {
                cls_extra = f_ann as f64 * mac_snn - e;
            }
            LayerEnergy {
                name: l.name.clone(),
                f_ann,
                f_snn,
                zeta: Some(z),
                op_kind: OpKind::Ac,
                e_ann_pj: e_ann,
                e_snn_pj: e,
            }
        };
        layers.push(entry);
        if l.kind.activation(Mode::Snn) == crate::network::Activation::Lif {
            feeding = match profile.zeta(&l.name) {
                Some(z) => Some(z),
                None => return input(format!("activity profile is missing layer {}", l.name)),
            };
        }
    }
    let e_ann: f64 = layers.iter().map(|l| l.e_ann_pj).sum();
    let e_snn: f64 = layers.iter().map(|l| l.e_snn_pj).sum();
    let mut ratios = Vec::new();
    for bits in [32, snn_bits] {
        if ratios.iter().any(|r: &EnergyRatio| r.ann_bits == bits) {
            continue;
        }
        let ea = total_ann(spec, constants.op_energy(OpKind::Mac, bits)?);
        ratios.push(EnergyRatio {
            ann_bits: bits,
            snn_bits,
            e_ann_pj: ea,
            e_snn_pj: e_snn,
            ratio: ea / e_snn,
        });
    }
    Ok(EnergyReport {
        ann_bits,
        snn_bits,
        layers,
        e_ann_pj: e_ann,
        e_snn_pj: e_snn,
        ratios,
        e_snn_classifier_mac_pj: e_snn + cls_extra,
        constants: *constants,
    })
}

/// Rounds to four significant digits.
pub fn sig4(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.3e}").parse().expect("formatted float parses")
}

impl EnergyReport {
    /// JSON with energies rounded to four significant digits.
    pub fn to_json(&self) -> Result<String> {
        let mut r = self.clone();
        for l in &mut r.layers {
            l.e_ann_pj = sig4(l.e_ann_pj);
            l.e_snn_pj = sig4(l.e_snn_pj);
        }
        r.e_ann_pj = sig4(r.e_ann_pj);
        r.e_snn_pj = sig4(r.e_snn_pj);
        r.e_snn_classifier_mac_pj = sig4(r.e_snn_classifier_mac_pj);
        for q in &mut r.ratios {
            q.e_ann_pj = sig4(q.e_ann_pj);
            q.e_snn_pj = sig4(q.e_snn_pj);
            q.ratio = sig4(q.ratio);
        }
        Ok(serde_json::to_string_pretty(&r)?)
    }

    /// One row per weighted layer; `e_pj` is the SNN-side energy.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,F_ann,F_snn,zeta,op_kind,e_pj,e_ann_pj\n");
        for l in &self.layers {
            let z = l.zeta.map(|z| format!("{}", sig4(z))).unwrap_or_default();
            let kind = match l.op_kind {
                OpKind::Mac => "MAC",
                OpKind::Ac => "AC",
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                l.name,
                l.f_ann,
                sig4(l.f_snn),
                z,
                kind,
                sig4(l.e_snn_pj),
                sig4(l.e_ann_pj)
            ));
        }
        s
    }
}
