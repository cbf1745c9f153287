//! Discrete-time integrate-and-fire dynamics with soft reset.
//!
//! Hidden neurons follow
//!
//! ```text
//! u[t] = λ·u[t-1] + drive[t] - v·o[t-1]
//! z[t] = u[t] / v - 1
//! o[t] = 1 if z[t] > 0 else 0
//! ```
//!
//! with one leak `λ` and threshold `v` shared by all neurons of a layer.
//! The output layer only integrates (no leak, no spikes, no reset).

mod trace;

pub use trace::{read_traces, write_traces, SpikeTrace};

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

/// Lower bound enforced on thresholds after every update.
pub const MIN_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub leak: f64,
    pub threshold: f64,
}

impl LifParams {
    pub fn new(leak: f64, threshold: f64) -> Result<Self> {
        let p = Self { leak, threshold };
        p.validate()?;
        Ok(p)
    }

    /// Non-leaky integrate-and-fire.
    pub fn integrate_and_fire(threshold: f64) -> Result<Self> {
        Self::new(1.0, threshold)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return config(format!("threshold must be positive, got {}", self.threshold));
        }
        if !self.leak.is_finite() {
            return config(format!("leak must be finite, got {}", self.leak));
        }
        Ok(())
    }
}

/// Nonlinearity mapping `z` to the layer output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikeFunction {
    /// Heaviside step `z > 0`; the real spiking neuron.
    Step,
    /// Continuous relaxation whose derivative is exactly the triangular
    /// surrogate `γ·max(0, 1 - |z|)`. Only used to check gradients against
    /// finite differences.
    Relaxed { gamma: f64 },
}

impl SpikeFunction {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            SpikeFunction::Step => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFunction::Relaxed { gamma } => {
                let r = if z <= -1.0 {
                    0.0
                } else if z <= 0.0 {
                    0.5 * (z + 1.0) * (z + 1.0)
                } else if z < 1.0 {
                    1.0 - 0.5 * (1.0 - z) * (1.0 - z)
                } else {
                    1.0
                };
                gamma * r
            }
        }
    }
}

/// Membrane potentials and previous-step outputs of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LifLayerState {
    pub u: Vec<f64>,
    pub o_prev: Vec<f64>,
}

/// Output of one hidden-layer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LifStep {
    pub spikes: Vec<f64>,
    pub z: Vec<f64>,
}

impl LifLayerState {
    /// Resting state: zero potential, no previous spikes.
    pub fn new(neurons: usize) -> Self {
        Self {
            u: vec![0.0; neurons],
            o_prev: vec![0.0; neurons],
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Leak, integrate, subtract the threshold where the neuron fired last step.
    pub fn integrate(&mut self, drive: &[f64], params: &LifParams) -> Result<()> {
        params.validate()?;
        if drive.len() != self.u.len() {
            return config(format!(
                "drive has {} entries, layer has {} neurons",
                drive.len(),
                self.u.len()
            ));
        }
        let (lambda, v) = (params.leak, params.threshold);
        for ((u, &d), &o) in self.u.iter_mut().zip(drive).zip(&self.o_prev) {
            *u = lambda * *u + d - v * o;
        }
        Ok(())
    }

    /// Threshold comparison on the current potentials; records the outputs
    /// as `o_prev` for the next step.
    pub fn fire(&mut self, params: &LifParams, spike_fn: SpikeFunction) -> LifStep {
        let v = params.threshold;
        let z: Vec<f64> = self.u.iter().map(|&u| u / v - 1.0).collect();
        let spikes: Vec<f64> = z.iter().map(|&z| spike_fn.apply(z)).collect();
        self.o_prev.clone_from(&spikes);
        LifStep { spikes, z }
    }

    pub fn step(&mut self, drive: &[f64], params: &LifParams) -> Result<LifStep> {
        self.integrate(drive, params)?;
        Ok(self.fire(params, SpikeFunction::Step))
    }
}

/// One LIF update: returns the new state, the binary spikes and `z = u/v - 1`.
pub fn lif_step(
    state: &LifLayerState,
    drive: &Tensor,
    params: &LifParams,
) -> Result<(LifLayerState, Tensor, Tensor)> {
    let mut next = state.clone();
    let out = next.step(drive.data(), params)?;
    Ok((
        next,
        Tensor::new(drive.shape().to_vec(), out.spikes)?,
        Tensor::new(drive.shape().to_vec(), out.z)?,
    ))
}

/// [`lif_step`] with unit leak.
pub fn if_step(state: &LifLayerState, drive: &Tensor, threshold: f64) -> Result<(LifLayerState, Tensor)> {
    let (next, spikes, _) = lif_step(state, drive, &LifParams::integrate_and_fire(threshold)?)?;
    Ok((next, spikes))
}

/// Output-layer update `u += drive`.
pub fn output_accumulate(u: &Tensor, drive: &Tensor) -> Result<Tensor> {
    if u.shape() != drive.shape() {
        return config(format!(
            "output drive shape {:?} differs from potential shape {:?}",
            drive.shape(),
            u.shape()
        ));
    }
    let data = u.data().iter().zip(drive.data()).map(|(a, b)| a + b).collect();
    Tensor::new(u.shape().to_vec(), data)
}

/// Direct input coding: the same analog frame presented at every timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectEncoding {
    frame: Tensor,
    steps: usize,
}

impl DirectEncoding {
    pub fn frame(&self) -> &Tensor {
        &self.frame
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::repeat_n(&self.frame, self.steps)
    }
}

/// Encodes a patch for `steps` timesteps, fake-quantizing it first when the
/// input layer is quantized.
pub fn direct_encode(patch: &Tensor, steps: usize, quant: Option<&QuantParams>) -> Result<DirectEncoding> {
    if steps < 1 {
        return config("number of timesteps must be at least 1");
    }
    let frame = match quant {
        Some(p) => crate::quant::fake_quantize(patch, p),
        None => patch.clone(),
    };
    Ok(DirectEncoding { frame, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{fake_quantize, QuantParams, QuantScheme};
    use proptest::prelude::*;

    fn one(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn constant_drive_hand_trace() {
        let p = LifParams::new(1.0, 1.0).unwrap();
        let mut s = LifLayerState::new(1);
        let a = s.step(&[0.6], &p).unwrap();
        assert_eq!((s.u[0], a.spikes[0]), (0.6, 0.0));
        let b = s.step(&[0.6], &p).unwrap();
        assert_eq!((s.u[0], b.spikes[0]), (1.2, 1.0));
        let c = s.step(&[0.6], &p).unwrap();
        assert!((s.u[0] - 0.8).abs() < 1e-12);
        assert_eq!(c.spikes[0], 0.0);
    }

    #[test]
    fn pure_leak() {
        let p = LifParams::new(0.5, 1.0).unwrap();
        let s = LifLayerState {
            u: vec![1.0],
            o_prev: vec![0.0],
        };
        let (next, spikes, _) = lif_step(&s, &one(0.0), &p).unwrap();
        assert_eq!(next.u, vec![0.5]);
        assert_eq!(spikes.data(), &[0.0]);
    }

    #[test]
    fn potential_equal_to_threshold_does_not_spike() {
        let p = LifParams::new(1.0, 1.0).unwrap();
        let (_, spikes, z) = lif_step(&LifLayerState::new(1), &one(1.0), &p).unwrap();
        assert_eq!(z.data(), &[0.0]);
        assert_eq!(spikes.data(), &[0.0]);
    }

    #[test]
    fn non_positive_threshold_rejected() {
        assert!(LifParams::new(1.0, 0.0).is_err());
        let bad = LifParams {
            leak: 1.0,
            threshold: -1.0,
        };
        assert!(lif_step(&LifLayerState::new(1), &one(1.0), &bad).is_err());
    }

    #[test]
    fn soft_reset_carries_surplus() {
        let s0 = LifLayerState::new(1);
        let (s1, o1) = if_step(&s0, &one(2.1), 1.0).unwrap();
        assert_eq!((s1.u[0], o1.data()[0]), (2.1, 1.0));
        let (s2, o2) = if_step(&s1, &one(0.0), 1.0).unwrap();
        assert!((s2.u[0] - 1.1).abs() < 1e-12);
        assert_eq!(o2.data()[0], 1.0);
    }

    #[test]
    fn if_equals_lif_with_unit_leak() {
        let drives = [0.3, 0.9, -0.2, 1.7, 0.0, 0.4];
        let mut a = LifLayerState::new(1);
        let mut b = LifLayerState::new(1);
        for &d in &drives {
            let (na, oa) = if_step(&a, &one(d), 0.7).unwrap();
            let (nb, ob, _) = lif_step(&b, &one(d), &LifParams::new(1.0, 0.7).unwrap()).unwrap();
            assert_eq!(na, nb);
            assert_eq!(oa, ob);
            a = na;
            b = nb;
        }
    }

    #[test]
    fn zero_input_with_unit_leak_keeps_resting_state() {
        let mut s = LifLayerState::new(3);
        for _ in 0..10 {
            let (n, o) = if_step(&s, &Tensor::zeros(&[3]), 1.0).unwrap();
            assert_eq!(n, s);
            assert!(o.data().iter().all(|&v| v == 0.0));
            s = n;
        }
    }

    #[test]
    fn output_accumulation() {
        let mut u = Tensor::zeros(&[2]);
        for _ in 0..5 {
            u = output_accumulate(&u, &Tensor::from_vec(vec![0.25, -1.0])).unwrap();
        }
        assert_eq!(u.data(), &[1.25, -5.0]);
        let same = output_accumulate(&u, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(same, u);
    }

    #[test]
    fn output_accumulation_equals_sum_of_drives() {
        let drives: Vec<f64> = (0..17).map(|i| ((i * 7919) % 113) as f64 / 37.0 - 1.3).collect();
        let mut u = Tensor::zeros(&[1]);
        let mut sum = 0.0;
        for &d in &drives {
            u = output_accumulate(&u, &one(d)).unwrap();
            sum += d;
        }
        assert_eq!(u.data()[0], sum);
    }

    #[test]
    fn direct_encoding_repeats_the_frame() {
        let patch = Tensor::from_vec(vec![0.1, -0.7, 2.3]);
        let enc = direct_encode(&patch, 5, None).unwrap();
        assert_eq!(enc.iter().count(), 5);
        assert!(enc.iter().all(|f| f == &patch));
        assert_eq!(direct_encode(&patch, 1, None).unwrap().iter().count(), 1);
        assert!(direct_encode(&patch, 0, None).is_err());

        let q = QuantParams::calibrate(patch.data(), 6, QuantScheme::Affine).unwrap();
        let enc = direct_encode(&patch, 3, Some(&q)).unwrap();
        let expected = fake_quantize(&patch, &q);
        assert!(enc.iter().all(|f| f == &expected));
    }

    #[test]
    fn relaxed_spike_derivative_is_triangle() {
        let f = SpikeFunction::Relaxed { gamma: 0.3 };
        for &z in &[-1.5, -0.7, -0.2, 0.0, 0.4, 0.9, 1.3] {
            let h = 1e-7;
            let fd = (f.apply(z + h) - f.apply(z - h)) / (2.0 * h);
            let tri = 0.3 * (1.0 - f64::abs(z)).max(0.0);
            // the kink at z = 0 costs O(h) in the central difference
            assert!((fd - tri).abs() < 1e-7, "z={z}");
        }
    }

    proptest! {
        #[test]
        fn spikes_are_binary(drives in prop::collection::vec(-2.0f64..3.0, 1..50), leak in 0.1f64..1.0, v in 0.1f64..2.0) {
            let p = LifParams::new(leak, v).unwrap();
            let mut s = LifLayerState::new(1);
            for d in drives {
                let out = s.step(&[d], &p).unwrap();
                prop_assert!(out.spikes[0] == 0.0 || out.spikes[0] == 1.0);
            }
        }

        #[test]
        fn soft_reset_conserves_charge(u0 in -1.0f64..6.0, v in 0.2f64..2.0) {
            let p = LifParams::new(1.0, v).unwrap();
            let mut s = LifLayerState { u: vec![u0], o_prev: vec![0.0] };
            let mut fired = 0.0;
            let total = u0;
            for _ in 0..20 {
                let out = s.step(&[0.0], &p).unwrap();
                // charge already removed for spikes emitted before this step
                prop_assert!((s.u[0] + v * fired - total).abs() < 1e-9);
                fired += out.spikes[0];
            }
        }

        #[test]
        fn threshold_scaling_covariance(drives in prop::collection::vec(-1.0f64..2.0, 1..30), leak in 0.2f64..1.0, c in 0.1f64..10.0) {
            let p = LifParams::new(leak, 0.8).unwrap();
            let pc = LifParams::new(leak, 0.8 * c).unwrap();
            let mut a = LifLayerState::new(1);
            let mut b = LifLayerState::new(1);
            for d in drives {
                let oa = a.step(&[d], &p).unwrap();
                let ob = b.step(&[d * c], &pc).unwrap();
                // allow for rounding at the exact boundary
                if oa.z[0].abs() > 1e-9 {
                    prop_assert_eq!(oa.spikes[0], ob.spikes[0]);
                } else {
                    b.o_prev = a.o_prev.clone();
                }
            }
        }
    }
}
