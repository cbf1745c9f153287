use super::surrogate;
use crate::error::{Error, Result};
use crate::network::{
    layer_input_grad, layer_weight_grad_acc, pool_backward, Activation, AnnTrace, LayerKind, Mode, NetworkSpec,
    SnnRecord,
};
use crate::neuron::LifParams;
use crate::quant::{ste_mask_in_place, QuantParams};
use crate::tensor::Tensor;

fn missing(what: &str) -> Error {
    Error::Internal(format!("forward record is missing {what}"))
}

/// Weight gradients of an ANN forward pass, one vector per weighted layer.
pub fn ann_backward(spec: &NetworkSpec, weights: &[Tensor], trace: &AnnTrace, grad_logits: &[f64]) -> Result<Vec<Vec<f64>>> {
    if trace.inputs.len() != spec.layers.len() + 1 {
        return Err(missing("layer inputs"));
    }
    let mut grads: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut wi = weights.len();
    let mut g = grad_logits.to_vec();
    for (i, layer) in spec.layers.iter().enumerate().rev() {
        match &layer.kind {
            k if k.is_weighted() => {
                wi -= 1;
                if k.activation(Mode::Ann) == Activation::Relu {
                    for (g, &y) in g.iter_mut().zip(&trace.inputs[i + 1]) {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                layer_weight_grad_acc(layer, &g, &trace.inputs[i], &mut grads[wi]);
                if i > 0 {
                    g = layer_input_grad(layer, &g, weights[wi].data());
                }
            }
            LayerKind::AvgPool2d { .. } => g = pool_backward(layer, &g)?,
            LayerKind::Dropout { .. } => {
                if let Some(m) = &trace.masks[i] {
                    g.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
                }
            }
            _ => unreachable!("weighted kinds handled above"),
        }
    }
    Ok(grads)
}

/// Gradients of one sample's loss. Weight gradients are with respect to the
/// effective (fake-quantized) weights; see [`apply_ste`].
#[derive(Clone, Debug, PartialEq)]
pub struct SnnGrads {
    pub weights: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
    pub leaks: Vec<f64>,
}

impl SnnGrads {
    pub fn zeros_like(weights: &[Tensor], spiking: usize) -> Self {
        Self {
            weights: weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            thresholds: vec![0.0; spiking],
            leaks: vec![0.0; spiking],
        }
    }

    pub fn add_assign(&mut self, other: &SnnGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        self.thresholds.iter_mut().zip(&other.thresholds).for_each(|(a, b)| *a += b);
        self.leaks.iter_mut().zip(&other.leaks).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, c: f64) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|a| *a *= c);
        }
        self.thresholds.iter_mut().for_each(|a| *a *= c);
        self.leaks.iter_mut().for_each(|a| *a *= c);
    }
}

/// Straight-through estimator: passes gradients of fake-quantized weights
/// to the master weights, zeroed where a master weight lies outside the
/// calibrated range.
pub fn apply_ste(grads: &mut SnnGrads, master: &[Tensor], params: &[Option<QuantParams>]) {
    for ((g, w), p) in grads.weights.iter_mut().zip(master).zip(params) {
        if let Some(p) = p {
            ste_mask_in_place(g, w.data(), p);
        }
    }
}

/// Reverse-time sweep over a recorded SNN forward pass.
///
/// `grad_out` is `∂L/∂u_L^T`. For each spiking layer the recurrence
/// `u^t = λ u^{t-1} + a^t - v o^{t-1}`, `z^t = u^t/v - 1`, `o^t = H(z^t)` is
/// differentiated with the triangular surrogate standing in for `H'`.
pub fn qstdb_backward(
    spec: &NetworkSpec,
    weights: &[Tensor],
    lif: &[LifParams],
    record: &SnnRecord,
    grad_out: &[f64],
    gamma: f64,
) -> Result<SnnGrads> {
    let spiking = spec.spiking_layers().len();
    if lif.len() != spiking || record.u.len() != spiking || record.o.len() != spiking {
        return Err(missing("spiking-layer state"));
    }
    if record.inputs.len() != spec.layers.len() {
        return Err(missing("layer inputs"));
    }
    let steps = record.o.first().map_or(0, Vec::len);
    if steps == 0 {
        return Err(missing("timesteps"));
    }
    let mut grads = SnnGrads::zeros_like(weights, spiking);

    let last = spec.layers.len() - 1;
    let cls_inputs = &record.inputs[last];
    if cls_inputs.len() != steps {
        return Err(missing("classifier inputs"));
    }
    let cls = &spec.layers[last];
    let wl = weights.len() - 1;
    let n_in = cls.input_len();
    let mut summed = vec![0.0; n_in];
    for x in cls_inputs {
        summed.iter_mut().zip(x).for_each(|(s, x)| *s += x);
    }
    layer_weight_grad_acc(cls, grad_out, &summed, &mut grads.weights[wl]);
    if grad_out.iter().all(|&g| g == 0.0) {
        return Ok(grads);
    }
    // the output layer integrates without reset, so every step sees W_L^T g
    let e = layer_input_grad(cls, grad_out, weights[wl].data());
    let mut err: Vec<Vec<f64>> = vec![e; steps];

    let mut wi = wl;
    let mut k = spiking;
    for (i, layer) in spec.layers.iter().enumerate().take(last).rev() {
        match &layer.kind {
            LayerKind::Dropout { .. } => {
                if let Some(m) = &record.masks[i] {
                    for e in &mut err {
                        e.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
                    }
                }
            }
            LayerKind::AvgPool2d { .. } => {
                for e in &mut err {
                    *e = pool_backward(layer, e)?;
                }
            }
            kind if kind.is_weighted() => {
                wi -= 1;
                k -= 1;
                let LifParams { leak: lambda, threshold: v } = lif[k];
                let (us, zs, os) = (&record.u[k], &record.z[k], &record.o[k]);
                if us.len() != steps || zs.len() != steps {
                    return Err(missing("membrane potentials"));
                }
                let n = layer.output_len();
                let mut du_next = vec![0.0; n];
                let mut drive_grads = vec![vec![0.0; n]; steps];
                let (mut dv, mut dl) = (0.0, 0.0);
                for t in (0..steps).rev() {
                    let du = &mut drive_grads[t];
                    for j in 0..n {
                        let d_o = err[t][j] - v * du_next[j];
                        let d_z = d_o * surrogate(zs[t][j], gamma);
                        let d_u = d_z / v + lambda * du_next[j];
                        dv -= d_z * us[t][j] / (v * v);
                        if t > 0 {
                            dv -= d_u * os[t - 1][j];
                            dl += d_u * us[t - 1][j];
                        }
                        du[j] = d_u;
                    }
                    du_next.clone_from(du);
                }
                grads.thresholds[k] = dv;
                grads.leaks[k] = dl;

                let inputs = &record.inputs[i];
                if inputs.len() == 1 && steps > 1 {
                    // time-invariant input: correlate once with the summed drive gradient
                    let mut total = vec![0.0; n];
                    for d in &drive_grads {
                        total.iter_mut().zip(d).for_each(|(s, d)| *s += d);
                    }
                    layer_weight_grad_acc(layer, &total, &inputs[0], &mut grads.weights[wi]);
                } else {
                    if inputs.len() != steps {
                        return Err(missing("layer inputs"));
                    }
                    for (d, x) in drive_grads.iter().zip(inputs) {
                        layer_weight_grad_acc(layer, d, x, &mut grads.weights[wi]);
                    }
                }
                if i > 0 {
                    err = drive_grads
                        .iter()
                        .map(|d| layer_input_grad(layer, d, weights[wi].data()))
                        .collect();
                }
            }
            _ => unreachable!("weighted kinds handled above"),
        }
    }
    Ok(grads)
}
