//! Layer graphs for the two hyperspectral architectures and their ANN (ReLU)
//! and SNN (LIF, unrolled in time) execution.

mod forward;
mod model;

pub use forward::{
    ann_forward, prepare_inference_weights, prepare_weights, snn_forward, AnnTrace, PreparedWeights, QuantSetting, SnnOptions,
    SnnOutput, SnnRecord,
};
pub(crate) use forward::{ann_forward_traced, layer_input_grad, layer_weight_grad_acc, pool_backward, Simulator};
pub use model::Model;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::tensor::{pool_extent, ConvGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ann,
    Snn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Lif,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv3d { geometry: ConvGeometry },
    /// Input axes other than the last two are folded into channels.
    Conv2d { geometry: ConvGeometry },
    AvgPool2d { window: [usize; 2], stride: [usize; 2] },
    Dropout { rate: f64 },
    Linear { in_features: usize, out_features: usize },
    Classifier { in_features: usize, out_features: usize },
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv3d { .. }
                | LayerKind::Conv2d { .. }
                | LayerKind::Linear { .. }
                | LayerKind::Classifier { .. }
        )
    }

    pub fn activation(&self, mode: Mode) -> Activation {
        match self {
            LayerKind::Conv3d { .. } | LayerKind::Conv2d { .. } | LayerKind::Linear { .. } => match mode {
                Mode::Ann => Activation::Relu,
                Mode::Snn => Activation::Lif,
            },
            _ => Activation::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub activation: Activation,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl LayerSpec {
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    /// Weight tensor shape, or `None` for parameter-free layers.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match &self.kind {
            LayerKind::Conv3d { geometry } => Some(geometry.weight_shape()),
            LayerKind::Conv2d { geometry } => Some(vec![
                geometry.out_channels,
                geometry.in_channels,
                geometry.kernel[1],
                geometry.kernel[2],
            ]),
            LayerKind::Linear {
                in_features,
                out_features,
            }
            | LayerKind::Classifier {
                in_features,
                out_features,
            } => Some(vec![*out_features, *in_features]),
            _ => None,
        }
    }

    /// Fan-in of one output neuron.
    pub fn fan_in(&self) -> usize {
        match &self.kind {
            LayerKind::Conv3d { geometry } | LayerKind::Conv2d { geometry } => {
                geometry.in_channels * geometry.kernel_volume()
            }
            LayerKind::Linear { in_features, .. } | LayerKind::Classifier { in_features, .. } => *in_features,
            _ => 0,
        }
    }
}

/// Shape of one input patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDescriptor {
    pub channels: usize,
    pub bands: usize,
    pub patch_size: usize,
}

impl InputDescriptor {
    /// `[C, bands, p, p]`.
    pub fn shape(&self) -> Vec<usize> {
        vec![self.channels, self.bands, self.patch_size, self.patch_size]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: String,
    pub input: InputDescriptor,
    pub num_classes: usize,
    pub mode: Mode,
    pub timesteps: usize,
    pub layers: Vec<LayerSpec>,
    /// Deviations from the nominal architecture made to keep shapes valid.
    #[serde(default)]
    pub adaptations: Vec<String>,
}

/// Incremental builder that propagates shapes layer by layer.
pub struct NetworkBuilder {
    architecture: String,
    input: InputDescriptor,
    shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    adaptations: Vec<String>,
}

impl NetworkBuilder {
    pub fn new(architecture: impl Into<String>, input: InputDescriptor) -> Self {
        Self {
            architecture: architecture.into(),
            shape: input.shape(),
            input,
            layers: Vec::new(),
            adaptations: Vec::new(),
        }
    }

    pub fn current_shape(&self) -> &[usize] {
        &self.shape
    }

    fn trace(&self) -> String {
        let mut s = format!("input {:?}", self.input.shape());
        for l in &self.layers {
            s.push_str(&format!(" -> {} {:?}", l.name, l.output_shape));
        }
        s
    }

    fn fail<T>(&self, name: &str, msg: impl std::fmt::Display) -> Result<T> {
        config(format!("shape propagation failed at {name}: {msg} (trace: {})", self.trace()))
    }

    fn next_name(&self, prefix: &str) -> String {
        let n = self.layers.iter().filter(|l| l.name.starts_with(prefix)).count();
        format!("{prefix}{}", n + 1)
    }

    fn push(&mut self, name: String, kind: LayerKind, out: Vec<usize>) -> &mut Self {
        self.layers.push(LayerSpec {
            name,
            activation: kind.activation(Mode::Ann),
            kind,
            input_shape: std::mem::replace(&mut self.shape, out.clone()),
            output_shape: out,
        });
        self
    }

    pub fn note(&mut self, adaptation: impl Into<String>) -> &mut Self {
        self.adaptations.push(adaptation.into());
        self
    }

    pub fn conv3d(
        &mut self,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<&mut Self> {
        let name = self.next_name("conv3d_");
        if self.shape.len() != 4 {
            return self.fail(&name, format!("expects [C, D, H, W], got {:?}", self.shape));
        }
        let geometry = ConvGeometry::conv3d(self.shape[0], out_channels, kernel, stride, padding);
        let ext = match geometry.output_extents([self.shape[1], self.shape[2], self.shape[3]]) {
            Ok(e) => e,
            Err(e) => return self.fail(&name, e),
        };
        Ok(self.push(
            name,
            LayerKind::Conv3d { geometry },
            vec![out_channels, ext[0], ext[1], ext[2]],
        ))
    }

    /// 2-D extents `(H^o, W^o)` a conv2d would produce on the current shape.
    pub fn conv2d_extent(&self, kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Option<[usize; 2]> {
        let n = self.shape.len();
        if n < 3 {
            return None;
        }
        let g = ConvGeometry::conv2d(1, 1, kernel, stride, padding);
        g.output_extents([1, self.shape[n - 2], self.shape[n - 1]])
            .ok()
            .map(|e| [e[1], e[2]])
    }

    pub fn conv2d(
        &mut self,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Result<&mut Self> {
        let name = self.next_name("conv2d_");
        let n = self.shape.len();
        if n < 3 {
            return self.fail(&name, format!("expects at least [C, H, W], got {:?}", self.shape));
        }
        let in_channels: usize = self.shape[..n - 2].iter().product();
        let geometry = ConvGeometry::conv2d(in_channels, out_channels, kernel, stride, padding);
        let ext = match geometry.output_extents([1, self.shape[n - 2], self.shape[n - 1]]) {
            Ok(e) => e,
            Err(e) => return self.fail(&name, e),
        };
        Ok(self.push(name, LayerKind::Conv2d { geometry }, vec![out_channels, ext[1], ext[2]]))
    }

    pub fn avgpool2d(&mut self, window: [usize; 2], stride: [usize; 2]) -> Result<&mut Self> {
        let name = self.next_name("avgpool_");
        if self.shape.len() != 3 {
            return self.fail(&name, format!("expects [C, H, W], got {:?}", self.shape));
        }
        let ho = pool_extent(self.shape[1], window[0], stride[0]);
        let wo = pool_extent(self.shape[2], window[1], stride[1]);
        match (ho, wo) {
            (Ok(ho), Ok(wo)) => {
                let c = self.shape[0];
                Ok(self.push(name, LayerKind::AvgPool2d { window, stride }, vec![c, ho, wo]))
            }
            (Err(e), _) | (_, Err(e)) => self.fail(&name, e),
        }
    }

    pub fn dropout(&mut self, rate: f64) -> Result<&mut Self> {
        let name = self.next_name("dropout_");
        if !(0.0..1.0).contains(&rate) {
            return self.fail(&name, format!("dropout rate {rate} outside [0, 1)"));
        }
        let shape = self.shape.clone();
        Ok(self.push(name, LayerKind::Dropout { rate }, shape))
    }

    pub fn linear(&mut self, out_features: usize) -> Result<&mut Self> {
        let name = self.next_name("linear_");
        if out_features == 0 {
            return self.fail(&name, "zero output features");
        }
        let in_features = self.shape.iter().product();
        Ok(self.push(
            name,
            LayerKind::Linear {
                in_features,
                out_features,
            },
            vec![out_features],
        ))
    }

    pub fn classifier(&mut self, num_classes: usize) -> Result<&mut Self> {
        if num_classes < 2 {
            return self.fail("classifier", format!("need at least 2 classes, got {num_classes}"));
        }
        let in_features = self.shape.iter().product();
        Ok(self.push(
            "classifier".into(),
            LayerKind::Classifier {
                in_features,
                out_features: num_classes,
            },
            vec![num_classes],
        ))
    }

    pub fn build(&self, mode: Mode, timesteps: usize) -> Result<NetworkSpec> {
        let Some(last) = self.layers.last() else {
            return config("network has no layers");
        };
        let LayerKind::Classifier { out_features, .. } = last.kind else {
            return config("network must end with a classifier layer");
        };
        let spec = NetworkSpec {
            architecture: self.architecture.clone(),
            input: self.input,
            num_classes: out_features,
            mode: Mode::Ann,
            timesteps,
            layers: self.layers.clone(),
            adaptations: self.adaptations.clone(),
        }
        .with_mode(mode);
        spec.validate()?;
        Ok(spec)
    }
}

/// Default classifier timesteps for SNN mode.
pub const DEFAULT_TIMESTEPS: usize = 5;

/// The fully 3-D architecture for 5×5 patches: six 3-D convolutions and a
/// linear classifier on the flattened features.
pub fn build_cnn3d(bands: usize, num_classes: usize) -> Result<NetworkSpec> {
    build_cnn3d_with_patch(bands, num_classes, 5)
}

pub fn build_cnn3d_with_patch(bands: usize, num_classes: usize, patch_size: usize) -> Result<NetworkSpec> {
    if bands < 16 {
        return config(format!("cnn3d needs at least 16 bands, got {bands}"));
    }
    let mut b = NetworkBuilder::new(
        "cnn3d",
        InputDescriptor {
            channels: 1,
            bands,
            patch_size,
        },
    );
    b.conv3d(20, [3, 3, 3], [1, 1, 1], [0, 0, 0])?
        .conv3d(40, [3, 1, 1], [2, 1, 1], [1, 0, 0])?
        .conv3d(84, [3, 3, 3], [1, 1, 1], [1, 0, 0])?
        .conv3d(84, [3, 1, 1], [2, 1, 1], [1, 0, 0])?
        .conv3d(84, [3, 1, 1], [1, 1, 1], [1, 0, 0])?
        .conv3d(84, [2, 1, 1], [2, 1, 1], [1, 0, 0])?
        .classifier(num_classes)?;
    b.build(Mode::Ann, DEFAULT_TIMESTEPS)
}

/// Default hidden width of the hybrid network's penultimate linear layer.
pub const CNN32H_HIDDEN: usize = 128;

/// The hybrid 3-D/2-D architecture for 3×3 patches.
pub fn build_cnn32h(bands: usize, num_classes: usize) -> Result<NetworkSpec> {
    build_cnn32h_with(bands, num_classes, 3, CNN32H_HIDDEN)
}

/// Hybrid network with explicit patch size and hidden width.
///
/// The 3-D stage output `(C, D, H, W)` is folded into `C·D` 2-D channels.
/// Small patches collapse the spatial extent, so a 2-D convolution gets
/// padding 1 whenever its valid output would be narrower than the pooling
/// window, and the pooling window shrinks to the remaining extent when it
/// cannot tile it. Both adaptations are recorded in `adaptations`.
pub fn build_cnn32h_with(
    bands: usize,
    num_classes: usize,
    patch_size: usize,
    hidden: usize,
) -> Result<NetworkSpec> {
    const POOL: usize = 4;
    if bands < 18 {
        return config(format!("cnn32h needs at least 18 bands, got {bands}"));
    }
    let mut b = NetworkBuilder::new(
        "cnn32h",
        InputDescriptor {
            channels: 1,
            bands,
            patch_size,
        },
    );
    b.conv3d(90, [18, 3, 3], [7, 1, 1], [0, 0, 0])?;
    for (i, filters) in [64, 128].into_iter().enumerate() {
        let valid = b.conv2d_extent([3, 3], [1, 1], [0, 0]);
        let pad = match valid {
            Some([h, w]) if h >= POOL && w >= POOL => 0,
            _ => 1,
        };
        if pad == 1 {
            b.note(format!("conv2d_{}: padding (1,1) inserted to keep the spatial extent", i + 1));
        }
        b.conv2d(filters, [3, 3], [1, 1], [pad, pad])?;
    }
    let (h, w) = {
        let s = b.current_shape();
        (s[1], s[2])
    };
    let tiles = |e: usize| e >= POOL && (e - POOL).is_multiple_of(POOL);
    if tiles(h) && tiles(w) {
        b.avgpool2d([POOL, POOL], [POOL, POOL])?;
    } else {
        b.note(format!(
            "avgpool_1: window (4,4) reduced to ({h},{w}) to match the {h}x{w} feature map"
        ));
        b.avgpool2d([h, w], [h, w])?;
    }
    b.dropout(0.2)?.linear(hidden)?.classifier(num_classes)?;
    b.build(Mode::Ann, DEFAULT_TIMESTEPS)
}

impl NetworkSpec {
    /// Same layers with activations switched to the given mode.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        for l in &mut self.layers {
            l.activation = l.kind.activation(mode);
        }
        self
    }

    pub fn with_timesteps(mut self, timesteps: usize) -> Self {
        self.timesteps = timesteps;
        self
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.input.shape()
    }

    /// Indices of layers carrying weights, in order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].kind.is_weighted()).collect()
    }

    /// Indices of hidden spiking layers (weighted, not the classifier).
    pub fn spiking_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.activation(Mode::Snn) == Activation::Lif)
            .collect()
    }

    pub fn weight_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().filter_map(LayerSpec::weight_shape).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Re-propagates shapes and checks every stored layer against them.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return config("network has no layers");
        }
        let mut b = NetworkBuilder::new(self.architecture.clone(), self.input);
        for l in &self.layers {
            let r = match &l.kind {
                LayerKind::Conv3d { geometry: g } => b.conv3d(g.out_channels, g.kernel, g.stride, g.padding).map(|_| ()),
                LayerKind::Conv2d { geometry: g } => b
                    .conv2d(
                        g.out_channels,
                        [g.kernel[1], g.kernel[2]],
                        [g.stride[1], g.stride[2]],
                        [g.padding[1], g.padding[2]],
                    )
                    .map(|_| ()),
                LayerKind::AvgPool2d { window, stride } => b.avgpool2d(*window, *stride).map(|_| ()),
                LayerKind::Dropout { rate } => b.dropout(*rate).map(|_| ()),
                LayerKind::Linear { out_features, .. } => b.linear(*out_features).map(|_| ()),
                LayerKind::Classifier { out_features, .. } => b.classifier(*out_features).map(|_| ()),
            };
            r?;
            let rebuilt = b.layers.last().expect("layer just pushed");
            if rebuilt.kind != l.kind || rebuilt.output_shape != l.output_shape || rebuilt.input_shape != l.input_shape {
                return config(format!("layer {} is inconsistent with shape propagation", l.name));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            let is_cls = matches!(l.kind, LayerKind::Classifier { .. });
            if is_cls != (i + 1 == self.layers.len()) {
                return config("the classifier must be the last layer and appear exactly once");
            }
        }
        if self.layers.last().map(LayerSpec::output_len) != Some(self.num_classes) {
            return config("classifier width differs from num_classes");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s).map_err(Error::from)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Whether another spec has the same layers and parameter shapes.
    pub fn same_architecture(&self, other: &NetworkSpec) -> bool {
        self.input == other.input
            && self.num_classes == other.num_classes
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.kind == b.kind && a.input_shape == b.input_shape)
    }
}
