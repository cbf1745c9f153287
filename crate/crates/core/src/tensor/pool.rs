use super::Tensor;
use crate::error::{config, Result};

/// Output extent of a pooling window along one axis; the window must tile
/// the axis exactly.
pub fn pool_extent(input: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return config("pooling window and stride must be positive");
    }
    if input < window || !(input - window).is_multiple_of(stride) {
        return config(format!(
            "pooling window {window} with stride {stride} does not cover extent {input}"
        ));
    }
    Ok((input - window) / stride + 1)
}

fn dims(input_shape: &[usize], window: [usize; 2], stride: [usize; 2]) -> Result<[usize; 5]> {
    if input_shape.len() != 3 {
        return config(format!("avgpool2d expects [C, H, W], got {input_shape:?}"));
    }
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let ho = pool_extent(h, window[0], stride[0])?;
    let wo = pool_extent(w, window[1], stride[1])?;
    Ok([c, h, w, ho, wo])
}

/// Mean over each `window` of a `[C, H, W]` tensor.
pub fn avgpool2d_forward(input: &Tensor, window: [usize; 2], stride: [usize; 2]) -> Result<Tensor> {
    let [c, h, w, ho, wo] = dims(input.shape(), window, stride)?;
    let x = input.data();
    let norm = 1.0 / (window[0] * window[1]) as f64;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for i in 0..window[0] {
                    for j in 0..window[1] {
                        acc += x[(ch * h + oh * stride[0] + i) * w + ow * stride[1] + j];
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Adjoint of [`avgpool2d_forward`]; `input_shape` is the forward input shape.
pub fn avgpool2d_backward(
    upstream: &Tensor,
    input_shape: &[usize],
    window: [usize; 2],
    stride: [usize; 2],
) -> Result<Tensor> {
    let [c, h, w, ho, wo] = dims(input_shape, window, stride)?;
    if upstream.shape() != [c, ho, wo] {
        return config(format!(
            "upstream gradient shape {:?} differs from pooled shape {:?}",
            upstream.shape(),
            [c, ho, wo]
        ));
    }
    let norm = 1.0 / (window[0] * window[1]) as f64;
    let g = upstream.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let v = g[(ch * ho + oh) * wo + ow] * norm;
                for i in 0..window[0] {
                    for j in 0..window[1] {
                        dx[(ch * h + oh * stride[0] + i) * w + ow * stride[1] + j] += v;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}
