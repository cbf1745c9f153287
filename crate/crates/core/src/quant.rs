//! Per-tensor uniform quantization.
//!
//! Two schemes map a real `w ∈ [w_min, w_max]` onto the signed `b`-bit grid
//! `[-2^(b-1), 2^(b-1) - 1]`:
//!
//! * **scale** (symmetric, zero-point 0): `s = (2^(b-1) - 1) / α` with
//!   `α = max(|w_min|, |w_max|)`, `q = round(s·w)`.
//! * **affine**: `s = (2^b - 1) / (w_max - w_min)`,
//!   `z = -2^(b-1) - round(s·w_min)`, `q = round(s·w) + z`.
//!
//! Rounding is to nearest with ties away from zero. Training uses affine
//! fake quantization; inference uses scale quantization so that a layer
//! reduces to an integer convolution followed by one multiply per output.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

/// Range floor used when a tensor is constant (or all zero).
pub const DEGENERATE_RANGE_EPS: f64 = 1e-12;
pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantScheme {
    Affine,
    Scale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scheme: QuantScheme,
    pub bits: u32,
    pub scale: f64,
    pub zero_point: i64,
    pub w_min: f64,
    pub w_max: f64,
}

fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return config(format!(
            "quantization bit width must be in [{MIN_BITS}, {MAX_BITS}], got {bits}"
        ));
    }
    Ok(())
}

impl QuantParams {
    /// Calibrates from the observed extrema of `values`.
    pub fn calibrate(values: &[f64], bits: u32, scheme: QuantScheme) -> Result<Self> {
        if values.is_empty() {
            return config("cannot calibrate quantization on an empty tensor");
        }
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Input("cannot calibrate quantization on non-finite values".into()));
        }
        Self::from_range(lo, hi, bits, scheme)
    }

    pub fn from_range(w_min: f64, w_max: f64, bits: u32, scheme: QuantScheme) -> Result<Self> {
        check_bits(bits)?;
        if w_min > w_max {
            return config(format!("empty quantization range [{w_min}, {w_max}]"));
        }
        let half = 2f64.powi(bits as i32 - 1);
        let alpha = w_min.abs().max(w_max.abs()).max(DEGENERATE_RANGE_EPS);
        let (scale, zero_point) = match scheme {
            QuantScheme::Scale => ((half - 1.0) / alpha, 0),
            QuantScheme::Affine => {
                let levels = 2.0 * half - 1.0;
                // a constant tensor gets the symmetric range [-α, α]
                let (lo, hi) = if w_max - w_min < DEGENERATE_RANGE_EPS {
                    (-alpha, alpha)
                } else {
                    (w_min, w_max)
                };
                let s = levels / (hi - lo);
                (s, (-half - (s * lo).round()) as i64)
            }
        };
        Ok(Self {
            scheme,
            bits,
            scale,
            zero_point,
            w_min,
            w_max,
        })
    }

    pub fn qmin(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    pub fn qmax(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Width of one quantization step in the real domain.
    pub fn step(&self) -> f64 {
        1.0 / self.scale
    }

    pub fn quantize_value(&self, w: f64) -> i64 {
        let q = (self.scale * w).round() + self.zero_point as f64;
        q.clamp(self.qmin() as f64, self.qmax() as f64) as i64
    }

    pub fn dequantize_value(&self, q: i64) -> f64 {
        (q - self.zero_point) as f64 / self.scale
    }

    pub fn fake_quantize_value(&self, w: f64) -> f64 {
        self.dequantize_value(self.quantize_value(w))
    }

    pub fn in_range(&self, w: f64) -> bool {
        w >= self.w_min && w <= self.w_max
    }
}

/// Integer tensor produced by [`quantize`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i64>,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return config(format!("integer tensor of shape {shape:?} has {} elements", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }
}

pub fn calibrate_params(t: &Tensor, bits: u32, scheme: QuantScheme) -> Result<QuantParams> {
    QuantParams::calibrate(t.data(), bits, scheme)
}

pub fn quantize(t: &Tensor, p: &QuantParams) -> QTensor {
    QTensor {
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|&w| p.quantize_value(w)).collect(),
    }
}

pub fn dequantize(q: &QTensor, p: &QuantParams) -> Tensor {
    Tensor::new(q.shape.clone(), q.data.iter().map(|&v| p.dequantize_value(v)).collect())
        .expect("shape carried over from a valid tensor")
}

pub fn fake_quantize(t: &Tensor, p: &QuantParams) -> Tensor {
    t.map(|w| p.fake_quantize_value(w))
}

pub(crate) fn fake_quantize_in_place(values: &mut [f64], p: &QuantParams) {
    for v in values {
        *v = p.fake_quantize_value(*v);
    }
}

/// Straight-through estimator: gradient passes where `w ∈ [w_min, w_max]`,
/// zero elsewhere.
pub fn ste_backward(upstream: &Tensor, w: &Tensor, p: &QuantParams) -> Result<Tensor> {
    if upstream.shape() != w.shape() {
        return config(format!(
            "STE: gradient shape {:?} differs from weight shape {:?}",
            upstream.shape(),
            w.shape()
        ));
    }
    let data = upstream
        .data()
        .iter()
        .zip(w.data())
        .map(|(&g, &w)| if p.in_range(w) { g } else { 0.0 })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

pub(crate) fn ste_mask_in_place(grad: &mut [f64], w: &[f64], p: &QuantParams) {
    for (g, &w) in grad.iter_mut().zip(w) {
        if !p.in_range(w) {
            *g = 0.0;
        }
    }
}

/// Scale quantization of a tensor of membrane potentials (dynamic per-tensor
/// range), applied in place.
pub fn quantize_potentials(u: &mut [f64], bits: u32) -> Result<()> {
    if u.is_empty() {
        return Ok(());
    }
    let alpha = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let p = QuantParams::from_range(-alpha, alpha, bits, QuantScheme::Scale)?;
    fake_quantize_in_place(u, &p);
    Ok(())
}

/// Re-derives symmetric scale parameters for inference from affine training
/// parameters: `α` is the larger magnitude of the dequantized affine extrema.
pub fn export_scale_params(affine: &QuantParams) -> Result<QuantParams> {
    let lo = affine.fake_quantize_value(affine.w_min);
    let hi = affine.fake_quantize_value(affine.w_max);
    let alpha = lo.abs().max(hi.abs());
    let mut p = QuantParams::from_range(-alpha, alpha, affine.bits, QuantScheme::Scale)?;
    p.w_min = lo;
    p.w_max = hi;
    Ok(p)
}

fn volume_and_extents(shape: &[usize], geom: &ConvGeometry) -> Result<[usize; 3]> {
    match shape.len() {
        4 => Ok([shape[1], shape[2], shape[3]]),
        3 if geom.is_2d() => Ok([1, shape[1], shape[2]]),
        _ => config(format!("integer conv: unsupported input shape {shape:?}")),
    }
}

/// Gather-form integer cross-correlation with 64-bit checked accumulation.
/// Padding positions read `pad_value`.
fn int_conv(
    x: &[i64],
    in_ext: [usize; 3],
    w: &[i64],
    geom: &ConvGeometry,
    pad_value: i64,
) -> Result<(Vec<i64>, [usize; 3])> {
    let out_ext = geom.output_extents(in_ext)?;
    let [d_in, h_in, w_in] = in_ext;
    let [d_out, h_out, w_out] = out_ext;
    let [kd, kh, kw] = geom.kernel;
    let ci_n = geom.in_channels;
    if x.len() != ci_n * d_in * h_in * w_in {
        return config("integer conv: input size does not match geometry");
    }
    if w.len() != geom.out_channels * ci_n * kd * kh * kw {
        return config("integer conv: weight size does not match geometry");
    }
    let overflow = || Error::Internal("integer convolution accumulator overflow".into());
    let mut out = Vec::with_capacity(geom.out_channels * d_out * h_out * w_out);
    for co in 0..geom.out_channels {
        for od in 0..d_out {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc: i64 = 0;
                    for ci in 0..ci_n {
                        for kz in 0..kd {
                            for kx in 0..kh {
                                for ky in 0..kw {
                                    let d = (od * geom.stride[0] + kz) as isize - geom.padding[0] as isize;
                                    let h = (oh * geom.stride[1] + kx) as isize - geom.padding[1] as isize;
                                    let c = (ow * geom.stride[2] + ky) as isize - geom.padding[2] as isize;
                                    let xv = if d < 0
                                        || h < 0
                                        || c < 0
                                        || d as usize >= d_in
                                        || h as usize >= h_in
                                        || c as usize >= w_in
                                    {
                                        pad_value
                                    } else {
                                        x[((ci * d_in + d as usize) * h_in + h as usize) * w_in + c as usize]
                                    };
                                    let wv = w[(((co * ci_n + ci) * kd + kz) * kh + kx) * kw + ky];
                                    let prod = xv.checked_mul(wv).ok_or_else(overflow)?;
                                    acc = acc.checked_add(prod).ok_or_else(overflow)?;
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok((out, out_ext))
}

fn conv_out_shape(input_shape: &[usize], geom: &ConvGeometry, out_ext: [usize; 3]) -> Vec<usize> {
    if input_shape.len() == 4 {
        vec![geom.out_channels, out_ext[0], out_ext[1], out_ext[2]]
    } else {
        vec![geom.out_channels, out_ext[1], out_ext[2]]
    }
}

/// Integer convolution of scale-quantized operands followed by a single
/// rescale `1 / (s_X · s_W)` per output element. Binary spike inputs use
/// `s_x = 1`.
pub fn scale_quantized_conv(
    xq: &QTensor,
    wq: &QTensor,
    s_x: f64,
    s_w: f64,
    geom: &ConvGeometry,
) -> Result<Tensor> {
    let in_ext = volume_and_extents(xq.shape(), geom)?;
    let (acc, out_ext) = int_conv(xq.data(), in_ext, wq.data(), geom, 0)?;
    let rescale = 1.0 / (s_x * s_w);
    Tensor::new(
        conv_out_shape(xq.shape(), geom, out_ext),
        acc.into_iter().map(|v| v as f64 * rescale).collect(),
    )
}

/// Affine-quantized convolution through the three-term expansion
/// `(X^Q ⊛ W^Q - z^X ⊛ (W^Q - z^W) - X^Q ⊛ z^W) / (s^X s^W)`.
///
/// The last term depends on the runtime activation and cannot be folded
/// offline, which is what makes affine inference more expensive than scale.
pub fn affine_quantized_conv(
    xq: &QTensor,
    px: &QuantParams,
    wq: &QTensor,
    pw: &QuantParams,
    geom: &ConvGeometry,
) -> Result<Tensor> {
    let in_ext = volume_and_extents(xq.shape(), geom)?;
    let zx = px.zero_point;
    let zw = pw.zero_point;
    // padded activations dequantize to zero, i.e. read z^X in the integer domain
    let (main, out_ext) = int_conv(xq.data(), in_ext, wq.data(), geom, zx)?;
    let zx_full = vec![zx; xq.data().len()];
    let w_centered: Vec<i64> = wq.data().iter().map(|&w| w - zw).collect();
    let (offline, _) = int_conv(&zx_full, in_ext, &w_centered, geom, zx)?;
    let zw_full = vec![zw; wq.data().len()];
    let (online, _) = int_conv(xq.data(), in_ext, &zw_full, geom, zx)?;
    let rescale = 1.0 / (px.scale * pw.scale);
    let data = main
        .iter()
        .zip(&offline)
        .zip(&online)
        .map(|((&a, &b), &c)| (a - b - c) as f64 * rescale)
        .collect();
    Tensor::new(conv_out_shape(xq.shape(), geom, out_ext), data)
}
