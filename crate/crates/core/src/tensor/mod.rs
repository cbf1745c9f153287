//! Dense tensors and the reference kernels (convolution, linear, pooling,
//! dropout) used by both the ANN and the SNN execution paths.
//!
//! All kernels operate on a single sample. Convolution is cross-correlation
//! (no kernel flip) and there are no bias terms anywhere.

mod conv;
mod dropout;
mod linear;
mod pool;

pub use conv::{
    conv2d_backward, conv2d_forward, conv3d_backward, conv3d_forward, conv_reference, ConvGrads,
    CountMacs, MacCounter, NoCount,
};
pub(crate) use conv::{conv_forward_raw, conv_input_grad, conv_weight_grad_acc};
pub use dropout::{dropout_apply, dropout_mask};
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub(crate) use linear::{linear_forward_raw, linear_input_grad, linear_weight_grad_acc};
pub use pool::{avgpool2d_backward, avgpool2d_forward, pool_extent};

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Dense row-major tensor of 64-bit reals. The last axis varies fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return config(format!("tensor extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return config(format!(
                "tensor of shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Same data viewed under a different shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| {
                debug_assert!(i < e);
                acc * e + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|x| a * x)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Convolution geometry. Axis order is always (spectral, height, width);
/// 2-D convolutions use a unit spectral kernel, stride and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn conv3d(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Self {
        Self {
            kernel: [1, kernel[0], kernel[1]],
            stride: [1, stride[0], stride[1]],
            padding: [0, padding[0], padding[1]],
            in_channels,
            out_channels,
        }
    }

    pub fn is_2d(&self) -> bool {
        self.kernel[0] == 1 && self.stride[0] == 1 && self.padding[0] == 0
    }

    /// `[C^o, C^i, k^z, k^x, k^y]`.
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        const AXES: [&str; 3] = ["spectral", "height", "width"];
        if self.in_channels == 0 || self.out_channels == 0 {
            return config("convolution channel counts must be positive");
        }
        for a in 0..3 {
            if self.kernel[a] == 0 {
                return config(format!("{} kernel extent must be positive", AXES[a]));
            }
            if self.stride[a] == 0 {
                return config(format!("{} stride must be positive", AXES[a]));
            }
        }
        Ok(())
    }

    /// Output extents `floor((in + 2 pad - kernel) / stride) + 1` per axis.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        const AXES: [&str; 3] = ["spectral", "height", "width"];
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if input[a] == 0 || padded < self.kernel[a] {
                return config(format!(
                    "{} axis: input extent {} with padding {} is smaller than kernel {}",
                    AXES[a], input[a], self.padding[a], self.kernel[a]
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}
