use super::{ConvGeometry, Tensor};
use crate::error::{config, Result};

/// Hook for counting multiply-accumulates issued by [`conv_reference`].
pub trait MacCounter {
    fn tick(&mut self);
}

/// Counter that counts nothing.
pub struct NoCount;

impl MacCounter for NoCount {
    #[inline(always)]
    fn tick(&mut self) {}
}

/// Counts every kernel tap evaluated, padding taps included (they multiply an
/// implicit zero but still occupy a MAC slot).
#[derive(Default, Debug)]
pub struct CountMacs(pub u64);

impl MacCounter for CountMacs {
    #[inline(always)]
    fn tick(&mut self) {
        self.0 += 1;
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
}

/// For one axis, which (kernel offset, partner position) pairs touch each
/// position, in ascending kernel offset.
struct AxisTaps {
    // input position -> [(k, out)]
    from_input: Vec<Vec<(usize, usize)>>,
    // output position -> [(k, in)]
    from_output: Vec<Vec<(usize, usize)>>,
}

impl AxisTaps {
    fn new(n_in: usize, n_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let mut from_input = vec![Vec::new(); n_in];
        let mut from_output = vec![Vec::new(); n_out];
        for (o, taps) in from_output.iter_mut().enumerate() {
            for k in 0..kernel {
                let p = o * stride + k;
                if p < pad || p - pad >= n_in {
                    continue;
                }
                let i = p - pad;
                taps.push((k, i));
                from_input[i].push((k, o));
            }
        }
        for taps in &mut from_input {
            taps.sort_unstable();
        }
        Self {
            from_input,
            from_output,
        }
    }
}

struct Plan {
    taps: [AxisTaps; 3],
    in_ext: [usize; 3],
    out_ext: [usize; 3],
}

impl Plan {
    fn new(in_ext: [usize; 3], out_ext: [usize; 3], geom: &ConvGeometry) -> Self {
        let axis = |a: usize| {
            AxisTaps::new(
                in_ext[a],
                out_ext[a],
                geom.kernel[a],
                geom.stride[a],
                geom.padding[a],
            )
        };
        Self {
            taps: [axis(0), axis(1), axis(2)],
            in_ext,
            out_ext,
        }
    }

    fn in_volume(&self) -> usize {
        self.in_ext.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out_ext.iter().product()
    }
}

/// Accumulates the cross-correlation of one sample into `out`.
///
/// Walks nonzero inputs and scatters them; for any fixed output element the
/// terms are added in (channel, k^z, k^x, k^y) order, identical to
/// [`conv_reference`], so both produce bitwise-equal results.
pub(crate) fn conv_forward_raw(
    input: &[f64],
    in_ext: [usize; 3],
    weights: &[f64],
    geom: &ConvGeometry,
    out_ext: [usize; 3],
    out: &mut [f64],
) {
    let plan = Plan::new(in_ext, out_ext, geom);
    let (in_n, out_n) = (plan.in_volume(), plan.out_volume());
    let [kd, kh, kw] = geom.kernel;
    let ksz = kd * kh * kw;
    let [_, h_in, w_in] = in_ext;
    let [_, h_out, w_out] = out_ext;
    let ci_n = geom.in_channels;
    for co in 0..geom.out_channels {
        let out_c = &mut out[co * out_n..(co + 1) * out_n];
        for ci in 0..ci_n {
            let w_c = &weights[(co * ci_n + ci) * ksz..(co * ci_n + ci + 1) * ksz];
            let in_c = &input[ci * in_n..(ci + 1) * in_n];
            for (d, td) in plan.taps[0].from_input.iter().enumerate() {
                for (h, th) in plan.taps[1].from_input.iter().enumerate() {
                    let row = (d * h_in + h) * w_in;
                    for (w, tw) in plan.taps[2].from_input.iter().enumerate() {
                        let x = in_c[row + w];
                        if x == 0.0 {
                            continue;
                        }
                        for &(kz, od) in td {
                            for &(kx, oh) in th {
                                let wrow = (kz * kh + kx) * kw;
                                let orow = (od * h_out + oh) * w_out;
                                for &(ky, ow) in tw {
                                    out_c[orow + ow] += w_c[wrow + ky] * x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the weight gradient `dW += upstream ⋆ input` into `dw`.
pub(crate) fn conv_weight_grad_acc(
    upstream: &[f64],
    input: &[f64],
    in_ext: [usize; 3],
    geom: &ConvGeometry,
    out_ext: [usize; 3],
    dw: &mut [f64],
) {
    let plan = Plan::new(in_ext, out_ext, geom);
    let (in_n, out_n) = (plan.in_volume(), plan.out_volume());
    let [kd, kh, kw] = geom.kernel;
    let ksz = kd * kh * kw;
    let [_, h_in, w_in] = in_ext;
    let [_, h_out, w_out] = out_ext;
    let ci_n = geom.in_channels;
    for ci in 0..ci_n {
        let in_c = &input[ci * in_n..(ci + 1) * in_n];
        for (d, td) in plan.taps[0].from_input.iter().enumerate() {
            for (h, th) in plan.taps[1].from_input.iter().enumerate() {
                let row = (d * h_in + h) * w_in;
                for (w, tw) in plan.taps[2].from_input.iter().enumerate() {
                    let x = in_c[row + w];
                    if x == 0.0 {
                        continue;
                    }
                    for co in 0..geom.out_channels {
                        let g_c = &upstream[co * out_n..(co + 1) * out_n];
                        let dw_c = &mut dw[(co * ci_n + ci) * ksz..(co * ci_n + ci + 1) * ksz];
                        for &(kz, od) in td {
                            for &(kx, oh) in th {
                                let wrow = (kz * kh + kx) * kw;
                                let orow = (od * h_out + oh) * w_out;
                                for &(ky, ow) in tw {
                                    dw_c[wrow + ky] += g_c[orow + ow] * x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the input: the transposed convolution of
/// `upstream` with `weights`.
pub(crate) fn conv_input_grad(
    upstream: &[f64],
    weights: &[f64],
    in_ext: [usize; 3],
    geom: &ConvGeometry,
    out_ext: [usize; 3],
) -> Vec<f64> {
    let plan = Plan::new(in_ext, out_ext, geom);
    let (in_n, out_n) = (plan.in_volume(), plan.out_volume());
    let [kd, kh, kw] = geom.kernel;
    let ksz = kd * kh * kw;
    let [_, h_in, w_in] = in_ext;
    let [_, h_out, w_out] = out_ext;
    let ci_n = geom.in_channels;
    let mut dx = vec![0.0; ci_n * in_n];
    for co in 0..geom.out_channels {
        let g_c = &upstream[co * out_n..(co + 1) * out_n];
        for (od, td) in plan.taps[0].from_output.iter().enumerate() {
            for (oh, th) in plan.taps[1].from_output.iter().enumerate() {
                let orow = (od * h_out + oh) * w_out;
                for (ow, tw) in plan.taps[2].from_output.iter().enumerate() {
                    let g = g_c[orow + ow];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..ci_n {
                        let w_c = &weights[(co * ci_n + ci) * ksz..(co * ci_n + ci + 1) * ksz];
                        let dx_c = &mut dx[ci * in_n..(ci + 1) * in_n];
                        for &(kz, d) in td {
                            for &(kx, h) in th {
                                let wrow = (kz * kh + kx) * kw;
                                let row = (d * h_in + h) * w_in;
                                for &(ky, w) in tw {
                                    dx_c[row + w] += w_c[wrow + ky] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Naive gather-form cross-correlation with one loop per index; the oracle
/// for the fast kernels and the instrumented source of MAC counts.
pub fn conv_reference<C: MacCounter>(
    input: &[f64],
    in_ext: [usize; 3],
    weights: &[f64],
    geom: &ConvGeometry,
    counter: &mut C,
) -> Result<Vec<f64>> {
    let out_ext = geom.output_extents(in_ext)?;
    let [d_in, h_in, w_in] = in_ext;
    let [d_out, h_out, w_out] = out_ext;
    let [kd, kh, kw] = geom.kernel;
    let ci_n = geom.in_channels;
    if input.len() != ci_n * d_in * h_in * w_in {
        return config("reference conv: input length does not match geometry");
    }
    if weights.len() != geom.out_channels * ci_n * kd * kh * kw {
        return config("reference conv: weight length does not match geometry");
    }
    let mut out = vec![0.0; geom.out_channels * d_out * h_out * w_out];
    let mut idx = 0;
    for co in 0..geom.out_channels {
        for od in 0..d_out {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for kz in 0..kd {
                            for kx in 0..kh {
                                for ky in 0..kw {
                                    counter.tick();
                                    let d = (od * geom.stride[0] + kz) as isize - geom.padding[0] as isize;
                                    let h = (oh * geom.stride[1] + kx) as isize - geom.padding[1] as isize;
                                    let w = (ow * geom.stride[2] + ky) as isize - geom.padding[2] as isize;
                                    if d < 0
                                        || h < 0
                                        || w < 0
                                        || d as usize >= d_in
                                        || h as usize >= h_in
                                        || w as usize >= w_in
                                    {
                                        continue;
                                    }
                                    let x = input[((ci * d_in + d as usize) * h_in + h as usize) * w_in
                                        + w as usize];
                                    if x == 0.0 {
                                        continue;
                                    }
                                    let wt = weights[(((co * ci_n + ci) * kd + kz) * kh + kx) * kw + ky];
                                    acc += wt * x;
                                }
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Ok(out)
}

fn check_shapes(input: &Tensor, weights: &Tensor, geom: &ConvGeometry, dims: usize) -> Result<[usize; 3]> {
    geom.validate()?;
    let ishape = input.shape();
    let wshape = weights.shape();
    if ishape.len() != dims + 1 {
        return config(format!(
            "conv{dims}d expects a {}-axis input, got shape {ishape:?}",
            dims + 1
        ));
    }
    if ishape[0] != geom.in_channels {
        return config(format!(
            "channel axis: input has {} channels, geometry expects {}",
            ishape[0], geom.in_channels
        ));
    }
    let in_ext = if dims == 3 {
        [ishape[1], ishape[2], ishape[3]]
    } else {
        if !geom.is_2d() {
            return config("conv2d requires a 2-D geometry");
        }
        [1, ishape[1], ishape[2]]
    };
    let expected_w: Vec<usize> = if dims == 3 {
        geom.weight_shape()
    } else {
        vec![geom.out_channels, geom.in_channels, geom.kernel[1], geom.kernel[2]]
    };
    if wshape != expected_w.as_slice() {
        return config(format!(
            "weight shape {wshape:?} does not match geometry {expected_w:?}"
        ));
    }
    Ok(in_ext)
}

fn out_shape(geom: &ConvGeometry, out_ext: [usize; 3], dims: usize) -> Vec<usize> {
    if dims == 3 {
        vec![geom.out_channels, out_ext[0], out_ext[1], out_ext[2]]
    } else {
        vec![geom.out_channels, out_ext[1], out_ext[2]]
    }
}

fn forward(input: &Tensor, weights: &Tensor, geom: &ConvGeometry, dims: usize) -> Result<Tensor> {
    let in_ext = check_shapes(input, weights, geom, dims)?;
    let out_ext = geom.output_extents(in_ext)?;
    let shape = out_shape(geom, out_ext, dims);
    let mut out = vec![0.0; shape.iter().product()];
    conv_forward_raw(input.data(), in_ext, weights.data(), geom, out_ext, &mut out);
    Tensor::new(shape, out)
}

fn backward(
    upstream: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    geom: &ConvGeometry,
    dims: usize,
) -> Result<ConvGrads> {
    let in_ext = check_shapes(input, weights, geom, dims)?;
    let out_ext = geom.output_extents(in_ext)?;
    let shape = out_shape(geom, out_ext, dims);
    if upstream.shape() != shape.as_slice() {
        return config(format!(
            "upstream gradient shape {:?} differs from forward output {shape:?}",
            upstream.shape()
        ));
    }
    let mut dw = vec![0.0; weights.len()];
    conv_weight_grad_acc(upstream.data(), input.data(), in_ext, geom, out_ext, &mut dw);
    let dx = conv_input_grad(upstream.data(), weights.data(), in_ext, geom, out_ext);
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weight: Tensor::new(weights.shape().to_vec(), dw)?,
    })
}

/// `[C^i, D, H, W] ⊛ [C^o, C^i, k^z, k^x, k^y] -> [C^o, D^o, H^o, W^o]`.
pub fn conv3d_forward(input: &Tensor, weights: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    forward(input, weights, geom, 3)
}

/// `[C^i, H, W] ⊛ [C^o, C^i, k, k] -> [C^o, H^o, W^o]`.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    forward(input, weights, geom, 2)
}

pub fn conv3d_backward(
    upstream: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    geom: &ConvGeometry,
) -> Result<ConvGrads> {
    backward(upstream, input, weights, geom, 3)
}

pub fn conv2d_backward(
    upstream: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    geom: &ConvGeometry,
) -> Result<ConvGrads> {
    backward(upstream, input, weights, geom, 2)
}
