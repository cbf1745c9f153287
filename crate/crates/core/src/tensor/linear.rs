use super::Tensor;
use crate::error::{config, Result};

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
}

/// `out[i] += sum_j w[i, j] * x[j]`, summed in ascending `j`, skipping zero
/// inputs (exact: adding a signed zero never changes a running sum that
/// starts at +0).
pub(crate) fn linear_forward_raw(input: &[f64], weights: &[f64], out: &mut [f64]) {
    let fi = input.len();
    let nz: Vec<usize> = (0..fi).filter(|&j| input[j] != 0.0).collect();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &weights[i * fi..(i + 1) * fi];
        let mut acc = 0.0;
        for &j in &nz {
            acc += row[j] * input[j];
        }
        *o += acc;
    }
}

pub(crate) fn linear_weight_grad_acc(upstream: &[f64], input: &[f64], dw: &mut [f64]) {
    let fi = input.len();
    for (i, &g) in upstream.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[i * fi..(i + 1) * fi];
        for (d, &x) in row.iter_mut().zip(input) {
            *d += g * x;
        }
    }
}

pub(crate) fn linear_input_grad(upstream: &[f64], weights: &[f64], fi: usize) -> Vec<f64> {
    let mut dx = vec![0.0; fi];
    for (i, &g) in upstream.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &weights[i * fi..(i + 1) * fi];
        for (d, &w) in dx.iter_mut().zip(row) {
            *d += g * w;
        }
    }
    dx
}

fn check(input: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    let ws = weights.shape();
    if ws.len() != 2 {
        return config(format!("linear weights must be 2-D, got {ws:?}"));
    }
    if input.len() != ws[1] {
        return config(format!(
            "linear layer expects {} input features, got {}",
            ws[1],
            input.len()
        ));
    }
    Ok((ws[1], ws[0]))
}

/// Matrix-vector product of `weights: [f_o, f_i]` with the flattened input.
pub fn linear_forward(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (_, fo) = check(input, weights)?;
    let mut out = vec![0.0; fo];
    linear_forward_raw(input.data(), weights.data(), &mut out);
    Ok(Tensor::from_vec(out))
}

pub fn linear_backward(upstream: &Tensor, input: &Tensor, weights: &Tensor) -> Result<LinearGrads> {
    let (fi, fo) = check(input, weights)?;
    if upstream.len() != fo {
        return config(format!(
            "upstream gradient has {} entries, linear layer has {fo} outputs",
            upstream.len()
        ));
    }
    let mut dw = vec![0.0; fi * fo];
    linear_weight_grad_acc(upstream.data(), input.data(), &mut dw);
    let dx = linear_input_grad(upstream.data(), weights.data(), fi);
    Ok(LinearGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weight: Tensor::new(weights.shape().to_vec(), dw)?,
    })
}
