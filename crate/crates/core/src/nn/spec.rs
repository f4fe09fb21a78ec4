use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// A layer as written by the user; extents are inferred from the input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense { units: usize },
    /// Valid convolution, stride 1, square kernel.
    Conv2d { filters: usize, kernel: usize },
    /// Non-overlapping square average pooling.
    AvgPool2d { size: usize },
    #[serde(rename = "activation")]
    Act { function: Activation },
}

/// A layer with every extent resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Op {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_c: usize,
        out_c: usize,
        k: usize,
        in_h: usize,
        in_w: usize,
    },
    AvgPool {
        c: usize,
        in_h: usize,
        in_w: usize,
        size: usize,
    },
    Act {
        function: Activation,
        len: usize,
    },
}

impl Op {
    #[cfg(test)]
    pub(crate) fn input_len(&self) -> usize {
        match *self {
            Op::Dense { inputs, .. } => inputs,
            Op::Conv2d { in_c, in_h, in_w, .. } => in_c * in_h * in_w,
            Op::AvgPool { c, in_h, in_w, .. } => c * in_h * in_w,
            Op::Act { len, .. } => len,
        }
    }

    pub(crate) fn output_len(&self) -> usize {
        match *self {
            Op::Dense { outputs, .. } => outputs,
            Op::Conv2d { out_c, k, in_h, in_w, .. } => out_c * (in_h - k + 1) * (in_w - k + 1),
            Op::AvgPool { c, in_h, in_w, size } => c * (in_h / size) * (in_w / size),
            Op::Act { len, .. } => len,
        }
    }

    /// (weight shape, bias length) for parameterised layers.
    pub(crate) fn param_shapes(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            Op::Dense { inputs, outputs } => Some((vec![outputs, inputs], outputs)),
            Op::Conv2d { in_c, out_c, k, .. } => Some((vec![out_c, in_c, k, k], out_c)),
            _ => None,
        }
    }

    /// (fan_in, fan_out) used for Glorot-uniform initialisation.
    pub(crate) fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            Op::Dense { inputs, outputs } => Some((inputs, outputs)),
            Op::Conv2d { in_c, out_c, k, .. } => Some((in_c * k * k, out_c * k * k)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelSpecDef {
    input: [usize; 3],
    layers: Vec<LayerKind>,
}

/// Network architecture: an input image shape `(C, H, W)` followed by a layer
/// stack whose last layer is the dense output layer. Softmax is folded into
/// the loss, so the network returns logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecDef", into = "ModelSpecDef")]
pub struct ModelSpec {
    input: [usize; 3],
    layers: Vec<LayerKind>,
    ops: Vec<Op>,
}

impl PartialEq for ModelSpec {
    fn eq(&self, other: &Self) -> bool {
        self.input == other.input && self.layers == other.layers
    }
}

impl TryFrom<ModelSpecDef> for ModelSpec {
    type Error = Error;

    fn try_from(def: ModelSpecDef) -> Result<Self> {
        ModelSpec::new(def.input, def.layers)
    }
}

impl From<ModelSpec> for ModelSpecDef {
    fn from(spec: ModelSpec) -> Self {
        ModelSpecDef { input: spec.input, layers: spec.layers }
    }
}

impl ModelSpec {
    pub fn new(input: [usize; 3], layers: Vec<LayerKind>) -> Result<Self> {
        if input.contains(&0) {
            return Err(Error::InvalidSpec(format!("input shape {input:?} has a zero extent")));
        }
        let Some(LayerKind::Dense { .. }) = layers.last() else {
            return Err(Error::InvalidSpec("the last layer must be the dense output layer".into()));
        };

        // (channels, height, width) while spatial; `None` once flattened.
        let mut spatial = Some((input[0], input[1], input[2]));
        let mut flat = input.iter().product::<usize>();
        let mut ops = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let op = match *layer {
                LayerKind::Dense { units } => {
                    if units == 0 {
                        return Err(Error::InvalidSpec(format!("layer {i}: dense layer with zero units")));
                    }
                    spatial = None;
                    Op::Dense { inputs: flat, outputs: units }
                }
                LayerKind::Conv2d { filters, kernel } => {
                    let (c, h, w) = spatial.ok_or_else(|| {
                        Error::InvalidSpec(format!("layer {i}: convolution after a dense layer"))
                    })?;
                    if filters == 0 || kernel == 0 || kernel > h || kernel > w {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: kernel {kernel} with {filters} filters does not fit {h}x{w}"
                        )));
                    }
                    spatial = Some((filters, h - kernel + 1, w - kernel + 1));
                    Op::Conv2d { in_c: c, out_c: filters, k: kernel, in_h: h, in_w: w }
                }
                LayerKind::AvgPool2d { size } => {
                    let (c, h, w) = spatial.ok_or_else(|| {
                        Error::InvalidSpec(format!("layer {i}: pooling after a dense layer"))
                    })?;
                    if size == 0 || h % size != 0 || w % size != 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: pool size {size} does not divide {h}x{w}"
                        )));
                    }
                    spatial = Some((c, h / size, w / size));
                    Op::AvgPool { c, in_h: h, in_w: w, size }
                }
                LayerKind::Act { function } => {
                    if i + 1 == layers.len() {
                        return Err(Error::InvalidSpec("activation after the output layer".into()));
                    }
                    Op::Act { function, len: flat }
                }
            };
            flat = op.output_len();
            ops.push(op);
        }
        Ok(Self { input, layers, ops })
    }

    /// conv(5x5, 6) - act - pool(2) - conv(5x5, 16) - act - pool(2) - dense(120) - act - dense(84) - act - dense(classes)
    pub fn lenet_lite(channels: usize, size: usize, classes: usize, act: Activation) -> Result<Self> {
        use LayerKind::*;
        Self::new(
            [channels, size, size],
            vec![
                Conv2d { filters: 6, kernel: 5 },
                Act { function: act },
                AvgPool2d { size: 2 },
                Conv2d { filters: 16, kernel: 5 },
                Act { function: act },
                AvgPool2d { size: 2 },
                Dense { units: 120 },
                Act { function: act },
                Dense { units: 84 },
                Act { function: act },
                Dense { units: classes },
            ],
        )
    }

    /// One 5x5 convolution with six filters feeding a dense classifier.
    pub fn toy_cnn(channels: usize, size: usize, classes: usize, act: Activation) -> Result<Self> {
        use LayerKind::*;
        Self::new(
            [channels, size, size],
            vec![Conv2d { filters: 6, kernel: 5 }, Act { function: act }, Dense { units: classes }],
        )
    }

    pub fn mlp(input: [usize; 3], hidden: &[usize], classes: usize, act: Activation) -> Result<Self> {
        let mut layers = Vec::new();
        for &units in hidden {
            layers.push(LayerKind::Dense { units });
            layers.push(LayerKind::Act { function: act });
        }
        layers.push(LayerKind::Dense { units: classes });
        Self::new(input, layers)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn layers(&self) -> &[LayerKind] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.ops.last().map(Op::output_len).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.ops
            .iter()
            .filter_map(Op::param_shapes)
            .map(|(w, b)| w.iter().product::<usize>() + b)
            .sum()
    }

    pub(crate) fn ops(&self) -> &[Op] {
        &self.ops
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consecutive_ops_compose() {
        let spec = ModelSpec::lenet_lite(3, 32, 10, Activation::Tanh).unwrap();
        for pair in spec.ops().windows(2) {
            assert_eq!(pair[0].output_len(), pair[1].input_len());
        }
        assert_eq!(spec.ops()[0].input_len(), spec.input_len());
    }

    #[test]
    fn lenet_lite_composes_at_32_and_16() {
        let spec = ModelSpec::lenet_lite(3, 32, 10, Activation::Tanh).unwrap();
        assert_eq!(spec.param_count(), 456 + 2416 + 48120 + 10164 + 850);
        assert_eq!(spec.num_classes(), 10);
        assert!(ModelSpec::lenet_lite(3, 16, 4, Activation::Relu).is_ok());
    }

    #[test]
    fn rejects_non_composing_layers() {
        use LayerKind::*;
        assert!(ModelSpec::new([1, 4, 4], vec![Conv2d { filters: 2, kernel: 5 }, Dense { units: 2 }]).is_err());
        assert!(ModelSpec::new([1, 5, 5], vec![AvgPool2d { size: 2 }, Dense { units: 2 }]).is_err());
        assert!(ModelSpec::new([1, 4, 4], vec![Dense { units: 3 }, Conv2d { filters: 1, kernel: 1 }]).is_err());
        assert!(ModelSpec::new([1, 4, 4], vec![Dense { units: 3 }, Act { function: Activation::Tanh }])
            .is_err());
        assert!(ModelSpec::new([1, 4, 4], vec![]).is_err());
    }
}
