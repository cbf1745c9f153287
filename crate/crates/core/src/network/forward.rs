use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, LayerKind, LayerSpec, NetworkSpec};
use crate::error::{config, input, Result};
use crate::neuron::{LifLayerState, LifParams, SpikeFunction};
use crate::quant::{
    calibrate_params, export_scale_params, fake_quantize, quantize_potentials, QuantParams, QuantScheme,
};
use crate::tensor::{
    avgpool2d_backward, avgpool2d_forward, conv_forward_raw, conv_input_grad, conv_weight_grad_acc,
    dropout_mask, linear_forward_raw, linear_input_grad, linear_weight_grad_acc, ConvGeometry, Tensor,
};

/// Quantization scheme and bit width for one kind of tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSetting {
    pub scheme: QuantScheme,
    pub bits: u32,
}

fn conv_dims(layer: &LayerSpec) -> Option<(&ConvGeometry, [usize; 3], [usize; 3])> {
    let (i, o) = (&layer.input_shape, &layer.output_shape);
    match &layer.kind {
        LayerKind::Conv3d { geometry } => Some((geometry, [i[1], i[2], i[3]], [o[1], o[2], o[3]])),
        LayerKind::Conv2d { geometry } => {
            let n = i.len();
            Some((geometry, [1, i[n - 2], i[n - 1]], [1, o[1], o[2]]))
        }
        _ => None,
    }
}

/// Pre-activation output of a weighted layer.
pub(crate) fn weighted_forward(layer: &LayerSpec, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layer.output_len()];
    match conv_dims(layer) {
        Some((g, ie, oe)) => conv_forward_raw(x, ie, w, g, oe, &mut out),
        None => linear_forward_raw(x, w, &mut out),
    }
    out
}

pub(crate) fn layer_weight_grad_acc(layer: &LayerSpec, upstream: &[f64], x: &[f64], dw: &mut [f64]) {
    match conv_dims(layer) {
        Some((g, ie, oe)) => conv_weight_grad_acc(upstream, x, ie, g, oe, dw),
        None => linear_weight_grad_acc(upstream, x, dw),
    }
}

pub(crate) fn layer_input_grad(layer: &LayerSpec, upstream: &[f64], w: &[f64]) -> Vec<f64> {
    match conv_dims(layer) {
        Some((g, ie, oe)) => conv_input_grad(upstream, w, ie, g, oe),
        None => linear_input_grad(upstream, w, layer.input_len()),
    }
}

fn pool_forward(layer: &LayerSpec, x: &[f64], window: [usize; 2], stride: [usize; 2]) -> Result<Vec<f64>> {
    let t = Tensor::new(layer.input_shape.clone(), x.to_vec())?;
    Ok(avgpool2d_forward(&t, window, stride)?.into_data())
}

pub(crate) fn pool_backward(layer: &LayerSpec, g: &[f64]) -> Result<Vec<f64>> {
    let LayerKind::AvgPool2d { window, stride } = layer.kind else {
        return config(format!("{} is not a pooling layer", layer.name));
    };
    let t = Tensor::new(layer.output_shape.clone(), g.to_vec())?;
    Ok(avgpool2d_backward(&t, &layer.input_shape, window, stride)?.into_data())
}

fn check_weights(spec: &NetworkSpec, weights: &[Tensor]) -> Result<()> {
    let shapes = spec.weight_shapes();
    if shapes.len() != weights.len() {
        return config(format!("network has {} weighted layers, got {} weight tensors", shapes.len(), weights.len()));
    }
    for (s, w) in shapes.iter().zip(weights) {
        if w.shape() != s.as_slice() {
            return config(format!("weight shape {:?} differs from expected {s:?}", w.shape()));
        }
    }
    Ok(())
}

fn check_patch(spec: &NetworkSpec, patch: &Tensor) -> Result<()> {
    let expected = spec.input_shape();
    if patch.shape() != expected.as_slice() && patch.len() != expected.iter().product::<usize>() {
        return input(format!("patch shape {:?} differs from {expected:?}", patch.shape()));
    }
    if patch.data().iter().any(|v| !v.is_finite()) {
        return input("patch contains non-finite values");
    }
    Ok(())
}

/// Per-layer inputs saved by an ANN forward pass; `inputs[i]` feeds layer
/// `i` and the final entry holds the logits.
#[derive(Clone, Debug)]
pub struct AnnTrace {
    pub inputs: Vec<Vec<f64>>,
    pub masks: Vec<Option<Vec<f64>>>,
}

impl AnnTrace {
    pub fn logits(&self) -> &[f64] {
        self.inputs.last().expect("trace holds at least the logits")
    }

    /// Inference-mode trace (dropout inactive) of one patch.
    pub fn record(spec: &NetworkSpec, weights: &[Tensor], patch: &Tensor) -> Result<Self> {
        check_weights(spec, weights)?;
        check_patch(spec, patch)?;
        ann_forward_traced::<rand_chacha::ChaCha8Rng>(spec, weights, patch.data(), None)
    }
}

/// ANN forward pass; dropout is active only when an RNG is supplied.
pub(crate) fn ann_forward_traced<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    weights: &[Tensor],
    x: &[f64],
    mut rng: Option<&mut R>,
) -> Result<AnnTrace> {
    let mut inputs = Vec::with_capacity(spec.layers.len() + 1);
    let mut masks = Vec::with_capacity(spec.layers.len());
    let mut cur = x.to_vec();
    let mut wi = 0;
    for layer in &spec.layers {
        let mut mask = None;
        let next = match &layer.kind {
            k if k.is_weighted() => {
                let mut o = weighted_forward(layer, &cur, weights[wi].data());
                wi += 1;
                if layer.kind.activation(super::Mode::Ann) == Activation::Relu {
                    o.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                o
            }
            LayerKind::AvgPool2d { window, stride } => pool_forward(layer, &cur, *window, *stride)?,
            LayerKind::Dropout { rate } => match rng.as_deref_mut() {
                Some(r) => {
                    let m = dropout_mask(cur.len(), *rate, r)?;
                    let o = cur.iter().zip(&m).map(|(a, b)| a * b).collect();
                    mask = Some(m);
                    o
                }
                None => cur.clone(),
            },
            _ => unreachable!("weighted kinds handled above"),
        };
        inputs.push(std::mem::replace(&mut cur, next));
        masks.push(mask);
    }
    inputs.push(cur);
    Ok(AnnTrace { inputs, masks })
}

/// Inference-mode ANN logits for one patch.
pub fn ann_forward(spec: &NetworkSpec, weights: &[Tensor], patch: &Tensor) -> Result<Tensor> {
    check_weights(spec, weights)?;
    check_patch(spec, patch)?;
    let trace = ann_forward_traced::<rand_chacha::ChaCha8Rng>(spec, weights, patch.data(), None)?;
    Ok(Tensor::from_vec(trace.inputs.last().cloned().unwrap_or_default()))
}

/// Effective (possibly fake-quantized) weights for one mini-batch or one
/// evaluation run, together with the quantization parameters used.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedWeights {
    pub effective: Vec<Tensor>,
    pub params: Vec<Option<QuantParams>>,
}

/// Per-tensor calibration and fake quantization of every weight tensor.
pub fn prepare_weights(weights: &[Tensor], quant: Option<QuantSetting>) -> Result<PreparedWeights> {
    let mut effective = Vec::with_capacity(weights.len());
    let mut params = Vec::with_capacity(weights.len());
    for w in weights {
        match quant {
            Some(q) => {
                let p = calibrate_params(w, q.bits, q.scheme)?;
                effective.push(fake_quantize(w, &p));
                params.push(Some(p));
            }
            None => {
                effective.push(w.clone());
                params.push(None);
            }
        }
    }
    Ok(PreparedWeights { effective, params })
}

/// Inference weights: affine fake quantization as in training, then scale
/// quantization with parameters re-derived from the symmetric range of the
/// affine-quantized tensor.
pub fn prepare_inference_weights(weights: &[Tensor], bits: u32) -> Result<PreparedWeights> {
    let mut effective = Vec::with_capacity(weights.len());
    let mut params = Vec::with_capacity(weights.len());
    for w in weights {
        let affine = calibrate_params(w, bits, QuantScheme::Affine)?;
        let trained = fake_quantize(w, &affine);
        let scale = export_scale_params(&affine)?;
        effective.push(fake_quantize(&trained, &scale));
        params.push(Some(scale));
    }
    Ok(PreparedWeights { effective, params })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnnOptions {
    pub timesteps: usize,
    /// Per-sample dynamic quantization of the input frame.
    pub input_quant: Option<QuantSetting>,
    /// Per-tensor scale quantization of hidden membrane potentials.
    pub potential_bits: Option<u32>,
    /// Also quantize the output-layer potentials.
    pub quantize_output: bool,
    pub spike_fn: SpikeFunction,
    /// Keep every intermediate needed for backpropagation through time.
    pub record: bool,
}

impl Default for SnnOptions {
    fn default() -> Self {
        Self {
            timesteps: super::DEFAULT_TIMESTEPS,
            input_quant: None,
            potential_bits: None,
            quantize_output: false,
            spike_fn: SpikeFunction::Step,
            record: false,
        }
    }
}

impl SnnOptions {
    pub fn with_timesteps(timesteps: usize) -> Self {
        Self {
            timesteps,
            ..Self::default()
        }
    }
}

/// Everything the reverse-time pass needs. Spiking-layer arrays are indexed
/// by position among spiking layers, then by timestep.
#[derive(Clone, Debug, Default)]
pub struct SnnRecord {
    /// `inputs[layer][t]`; layers with a time-invariant input store one entry.
    pub inputs: Vec<Vec<Vec<f64>>>,
    pub u: Vec<Vec<Vec<f64>>>,
    pub z: Vec<Vec<Vec<f64>>>,
    pub o: Vec<Vec<Vec<f64>>>,
    pub masks: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct SnnOutput {
    /// Output-layer potentials after the last step.
    pub potentials: Tensor,
    /// Total output (spike count) of each spiking layer over all steps.
    pub spike_totals: Vec<f64>,
    /// Nonzero entries of the input frame, summed over steps.
    pub input_nonzeros: f64,
    /// Binary outputs per spiking layer and step, kept when recording.
    pub record: Option<SnnRecord>,
}

/// Time-stepped execution of a spiking network on one patch.
pub(crate) struct Simulator<'a> {
    spec: &'a NetworkSpec,
    weights: &'a [Tensor],
    lif: &'a [LifParams],
    opts: &'a SnnOptions,
    frame: Vec<f64>,
    first_drive: Option<Vec<f64>>,
    states: Vec<LifLayerState>,
    lif_of_layer: Vec<Option<usize>>,
    weight_of_layer: Vec<Option<usize>>,
    masks: Vec<Option<Vec<f64>>>,
    pub u_out: Vec<f64>,
    pub spike_totals: Vec<f64>,
    pub input_nonzeros: f64,
    pub record: Option<SnnRecord>,
}

impl<'a> Simulator<'a> {
    /// `lif` may cover only a prefix of the spiking layers when the run stops
    /// early (threshold calibration).
    pub fn new<R: Rng + ?Sized>(
        spec: &'a NetworkSpec,
        weights: &'a [Tensor],
        lif: &'a [LifParams],
        opts: &'a SnnOptions,
        patch: &Tensor,
        rng: Option<&mut R>,
    ) -> Result<Self> {
        if opts.timesteps < 1 {
            return config("number of timesteps must be at least 1");
        }
        check_weights(spec, weights)?;
        check_patch(spec, patch)?;
        for p in lif {
            p.validate()?;
        }
        let frame = match opts.input_quant {
            Some(q) => {
                let p = calibrate_params(patch, q.bits, q.scheme)?;
                fake_quantize(patch, &p).into_data()
            }
            None => patch.data().to_vec(),
        };
        let mut lif_of_layer = Vec::with_capacity(spec.layers.len());
        let mut weight_of_layer = Vec::with_capacity(spec.layers.len());
        let mut states = Vec::new();
        let (mut k, mut wi) = (0, 0);
        for layer in &spec.layers {
            if layer.kind.is_weighted() {
                weight_of_layer.push(Some(wi));
                wi += 1;
            } else {
                weight_of_layer.push(None);
            }
            if layer.kind.activation(super::Mode::Snn) == Activation::Lif {
                lif_of_layer.push(Some(k));
                states.push(LifLayerState::new(layer.output_len()));
                k += 1;
            } else {
                lif_of_layer.push(None);
            }
        }
        let mut masks = vec![None; spec.layers.len()];
        if let Some(r) = rng {
            for (i, layer) in spec.layers.iter().enumerate() {
                if let LayerKind::Dropout { rate } = layer.kind {
                    masks[i] = Some(dropout_mask(layer.input_len(), rate, r)?);
                }
            }
        }
        let record = opts.record.then(|| SnnRecord {
            inputs: vec![Vec::new(); spec.layers.len()],
            u: vec![Vec::new(); k],
            z: vec![Vec::new(); k],
            o: vec![Vec::new(); k],
            masks: masks.clone(),
        });
        Ok(Self {
            spec,
            weights,
            lif,
            opts,
            frame,
            first_drive: None,
            states,
            lif_of_layer,
            weight_of_layer,
            masks,
            u_out: vec![0.0; spec.num_classes],
            spike_totals: vec![0.0; k],
            input_nonzeros: 0.0,
            record,
        })
    }

    /// Advances one timestep. With `stop_at = Some(i)` (a weighted layer) the
    /// step ends there and returns that layer's drive, leaving it unchanged.
    pub fn step(&mut self, stop_at: Option<usize>) -> Result<Option<Vec<f64>>> {
        let spec = self.spec;
        let mut cur: Vec<f64> = Vec::new();
        self.input_nonzeros += self.frame.iter().filter(|v| **v != 0.0).count() as f64;
        for (i, layer) in spec.layers.iter().enumerate() {
            let x: &[f64] = if i == 0 { &self.frame } else { &cur };
            let next = match &layer.kind {
                k if k.is_weighted() => {
                    let w = self.weights[self.weight_of_layer[i].expect("weighted layer")].data();
                    let drive = if i == 0 {
                        // direct encoding: the first drive never changes
                        self.first_drive.get_or_insert_with(|| weighted_forward(layer, x, w)).clone()
                    } else {
                        weighted_forward(layer, x, w)
                    };
                    if stop_at == Some(i) {
                        return Ok(Some(drive));
                    }
                    if let Some(rec) = self.record.as_mut() {
                        if i > 0 || rec.inputs[0].is_empty() {
                            rec.inputs[i].push(x.to_vec());
                        }
                    }
                    match self.lif_of_layer[i] {
                        Some(k) => {
                            let Some(p) = self.lif.get(k) else {
                                return config(format!("no LIF parameters for layer {}", layer.name));
                            };
                            let st = &mut self.states[k];
                            st.integrate(&drive, p)?;
                            if let Some(bits) = self.opts.potential_bits {
                                quantize_potentials(&mut st.u, bits)?;
                            }
                            let u_rec = self.record.as_ref().map(|_| st.u.clone());
                            let out = st.fire(p, self.opts.spike_fn);
                            self.spike_totals[k] += out.spikes.iter().sum::<f64>();
                            if let (Some(rec), Some(u)) = (self.record.as_mut(), u_rec) {
                                rec.u[k].push(u);
                                rec.z[k].push(out.z);
                                rec.o[k].push(out.spikes.clone());
                            }
                            out.spikes
                        }
                        None => {
                            for (u, d) in self.u_out.iter_mut().zip(&drive) {
                                *u += d;
                            }
                            if self.opts.quantize_output {
                                if let Some(bits) = self.opts.potential_bits {
                                    quantize_potentials(&mut self.u_out, bits)?;
                                }
                            }
                            Vec::new()
                        }
                    }
                }
                LayerKind::AvgPool2d { window, stride } => {
                    if let Some(rec) = self.record.as_mut() {
                        rec.inputs[i].push(x.to_vec());
                    }
                    pool_forward(layer, x, *window, *stride)?
                }
                LayerKind::Dropout { .. } => {
                    if let Some(rec) = self.record.as_mut() {
                        rec.inputs[i].push(x.to_vec());
                    }
                    match &self.masks[i] {
                        Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
                        None => x.to_vec(),
                    }
                }
                _ => unreachable!("weighted kinds handled above"),
            };
            cur = next;
        }
        Ok(None)
    }

    pub fn run(mut self) -> Result<SnnOutput> {
        for _ in 0..self.opts.timesteps {
            self.step(None)?;
        }
        Ok(SnnOutput {
            potentials: Tensor::from_vec(self.u_out),
            spike_totals: self.spike_totals,
            input_nonzeros: self.input_nonzeros,
            record: self.record,
        })
    }
}

/// Inference-mode SNN run over `opts.timesteps` steps with direct encoding.
pub fn snn_forward(
    spec: &NetworkSpec,
    weights: &[Tensor],
    lif: &[LifParams],
    patch: &Tensor,
    opts: &SnnOptions,
) -> Result<SnnOutput> {
    let n = spec.spiking_layers().len();
    if lif.len() != n {
        return config(format!("network has {n} spiking layers, got {} LIF parameter sets", lif.len()));
    }
    Simulator::new::<rand_chacha::ChaCha8Rng>(spec, weights, lif, opts, patch, None)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_cnn32h, build_cnn3d, InputDescriptor, Model, NetworkBuilder};

    fn tiny_spec() -> NetworkSpec {
        let mut b = NetworkBuilder::new(
            "custom",
            InputDescriptor {
                channels: 1,
                bands: 4,
                patch_size: 3,
            },
        );
        b.conv3d(2, [3, 3, 3], [1, 1, 1], [0, 0, 0]).unwrap().linear(3).unwrap().classifier(2).unwrap();
        b.build(super::super::Mode::Snn, 4).unwrap()
    }

    #[test]
    fn ann_forward_matches_manual_composition() {
        let spec = tiny_spec();
        let m = Model::init(spec.clone(), 3);
        let patch = Tensor::new(spec.input_shape(), (0..36).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let logits = ann_forward(&spec, &m.weights, &patch).unwrap();
        let g = ConvGeometry::conv3d(1, 2, [3, 3, 3], [1, 1, 1], [0, 0, 0]);
        let h1 = crate::tensor::conv3d_forward(&patch, &m.weights[0], &g).unwrap().map(|v| v.max(0.0));
        let h1 = h1.reshape(vec![4]).unwrap();
        let h2 = crate::tensor::linear_forward(&h1, &m.weights[1]).unwrap().map(|v| v.max(0.0));
        let out = crate::tensor::linear_forward(&h2, &m.weights[2]).unwrap();
        for (a, b) in logits.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn snn_requires_lif_parameters() {
        let spec = tiny_spec();
        let m = Model::init(spec.clone(), 1);
        let patch = Tensor::zeros(&spec.input_shape());
        assert!(snn_forward(&spec, &m.weights, &[], &patch, &SnnOptions::default()).is_err());
    }

    #[test]
    fn snn_zero_input_produces_no_spikes() {
        let spec = build_cnn3d(16, 3).unwrap().with_mode(super::super::Mode::Snn);
        let m = Model::init(spec.clone(), 1);
        let lif = vec![LifParams::new(1.0, 1.0).unwrap(); spec.spiking_layers().len()];
        let out = snn_forward(&spec, &m.weights, &lif, &Tensor::zeros(&spec.input_shape()), &SnnOptions::default()).unwrap();
        assert!(out.spike_totals.iter().all(|&s| s == 0.0));
        assert!(out.potentials.data().iter().all(|&u| u == 0.0));
    }

    #[test]
    fn snn_output_is_sum_of_classifier_drives() {
        // with spikes recorded, u_L^T must equal W_L applied to the summed
        // penultimate outputs
        let spec = tiny_spec();
        let m = Model::init(spec.clone(), 9);
        let lif = vec![LifParams::new(0.9, 0.2).unwrap(); 2];
        let patch = Tensor::new(spec.input_shape(), (0..36).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let opts = SnnOptions {
            timesteps: 6,
            record: true,
            ..SnnOptions::default()
        };
        let out = snn_forward(&spec, &m.weights, &lif, &patch, &opts).unwrap();
        let rec = out.record.unwrap();
        let mut sum = vec![0.0; 3];
        for o in &rec.o[1] {
            for (s, v) in sum.iter_mut().zip(o) {
                *s += v;
            }
        }
        let expect = crate::tensor::linear_forward(&Tensor::from_vec(sum), &m.weights[2]).unwrap();
        for (a, b) in out.potentials.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(rec.inputs[0].len(), 1);
        assert_eq!(rec.inputs[1].len(), 6);
    }

    #[test]
    fn cnn32h_runs_in_both_modes() {
        let spec = build_cnn32h(40, 4).unwrap();
        let m = Model::init(spec.clone(), 5);
        let patch = Tensor::full(&spec.input_shape(), 0.5);
        assert_eq!(ann_forward(&spec, &m.weights, &patch).unwrap().len(), 4);
        let snn = spec.with_mode(super::super::Mode::Snn);
        let lif = vec![LifParams::new(1.0, 0.5).unwrap(); snn.spiking_layers().len()];
        let out = snn_forward(&snn, &m.weights, &lif, &patch, &SnnOptions::default()).unwrap();
        assert_eq!(out.potentials.len(), 4);
    }

    #[test]
    fn prepare_weights_fake_quantizes_each_tensor() {
        let w = vec![Tensor::from_vec(vec![-1.0, 0.3, 0.7]), Tensor::from_vec(vec![2.0, -0.5])];
        let p = prepare_weights(
            &w,
            Some(QuantSetting {
                scheme: QuantScheme::Scale,
                bits: 3,
            }),
        )
        .unwrap();
        assert_eq!(p.effective[0].data(), &[-1.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert!(p.params.iter().all(Option::is_some));
        assert_eq!(prepare_weights(&w, None).unwrap().effective, w);
    }
}
