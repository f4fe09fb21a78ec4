use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Weight,
    Bias,
}

/// One contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub layer: usize,
    pub role: ParamRole,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

/// Flat parameter vector plus the per-layer layout that slices it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub flat: Vec<f64>,
    pub layout: Vec<ParamBlock>,
}

/// Gradient of the loss with respect to the parameters (same layout as
/// [`ModelParams::flat`]) and, when requested, with respect to the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub params: Vec<f64>,
    pub input: Option<Tensor>,
}

pub(crate) fn layout_for(spec: &ModelSpec) -> Vec<ParamBlock> {
    let mut offset = 0;
    let mut blocks = Vec::new();
    for (layer, op) in spec.ops().iter().enumerate() {
        if let Some((wshape, blen)) = op.param_shapes() {
            let wlen = wshape.iter().product();
            blocks.push(ParamBlock { layer, role: ParamRole::Weight, offset, len: wlen, shape: wshape });
            offset += wlen;
            blocks.push(ParamBlock { layer, role: ParamRole::Bias, offset, len: blen, shape: vec![blen] });
            offset += blen;
        }
    }
    blocks
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ModelParams {
    let layout = layout_for(spec);
    let mut flat = vec![0.0; spec.param_count()];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for block in layout.iter().filter(|b| b.role == ParamRole::Weight) {
        let (fan_in, fan_out) = spec.ops()[block.layer].fans().expect("weight block on a parameterised layer");
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut flat[block.offset..block.offset + block.len] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    ModelParams { flat, layout }
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self { flat: vec![0.0; spec.param_count()], layout: layout_for(spec) }
    }

    pub fn from_flat(spec: &ModelSpec, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::LengthMismatch { expected: spec.param_count(), actual: flat.len() });
        }
        Ok(Self { flat, layout: layout_for(spec) })
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Splits the flat vector into one tensor per layout block.
    pub fn unflatten(&self) -> Vec<Tensor> {
        self.layout
            .iter()
            .map(|b| {
                Tensor::new(b.shape.clone(), self.flat[b.offset..b.offset + b.len].to_vec())
                    .expect("layout block shape matches its length")
            })
            .collect()
    }

    /// Inverse of [`unflatten`](Self::unflatten).
    pub fn flatten(layout: Vec<ParamBlock>, blocks: &[Tensor]) -> Result<Self> {
        if layout.len() != blocks.len() {
            return Err(Error::LengthMismatch { expected: layout.len(), actual: blocks.len() });
        }
        let total = layout.last().map(|b| b.offset + b.len).unwrap_or(0);
        let mut flat = Vec::with_capacity(total);
        for (b, t) in layout.iter().zip(blocks) {
            if t.shape() != b.shape.as_slice() || flat.len() != b.offset {
                return Err(Error::ShapeMismatch { expected: b.shape.clone(), actual: t.shape().to_vec() });
            }
            flat.extend_from_slice(t.values());
        }
        Ok(Self { flat, layout })
    }

    /// Checks that the layout is contiguous and covers the flat vector.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for b in &self.layout {
            if b.offset != next || b.shape.iter().product::<usize>() != b.len {
                return Err(Error::InvalidShape(format!("layout block at offset {} is not contiguous", b.offset)));
            }
            next += b.len;
        }
        if next != self.flat.len() {
            return Err(Error::LengthMismatch { expected: next, actual: self.flat.len() });
        }
        Ok(())
    }
}

/// `flat - lr * grad`, element-wise.
pub fn sgd_step(params: &ModelParams, grad: &[f64], lr: f64) -> Result<ModelParams> {
    if grad.len() != params.flat.len() {
        return Err(Error::LengthMismatch { expected: params.flat.len(), actual: grad.len() });
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    let flat = params.flat.iter().zip(grad).map(|(w, g)| w - lr * g).collect();
    Ok(ModelParams { flat, layout: params.layout.clone() })
}
