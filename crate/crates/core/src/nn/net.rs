use super::params::{Gradient, ModelParams, ParamRole};
use super::spec::{ModelSpec, Op};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-sample layer activations recorded by [`forward`]; `acts[s][0]` is the
/// input of sample `s` and `acts[s][i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Vec<Vec<f64>>>,
    input_shape: Vec<usize>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.acts.len()
    }
}

/// Weight and bias offsets for every layer that has parameters.
fn param_offsets(spec: &ModelSpec, params: &ModelParams) -> Result<Vec<Option<(usize, usize)>>> {
    if params.flat.len() != spec.param_count() {
        return Err(Error::LengthMismatch { expected: spec.param_count(), actual: params.flat.len() });
    }
    let mut offsets = vec![None; spec.ops().len()];
    let mut weight = None;
    for block in &params.layout {
        match block.role {
            ParamRole::Weight => weight = Some(block.offset),
            ParamRole::Bias => {
                let w = weight.take().ok_or_else(|| Error::InvalidShape("bias block without weight".into()))?;
                offsets[block.layer] = Some((w, block.offset));
            }
        }
    }
    Ok(offsets)
}

fn check_batch(spec: &ModelSpec, batch: &Tensor) -> Result<usize> {
    let shape = batch.shape();
    let input = spec.input_shape();
    let matches = match shape.len() {
        4 => shape[1..] == input,
        2 => shape[1] == spec.input_len(),
        _ => false,
    };
    if !matches {
        let mut expected = vec![shape.first().copied().unwrap_or(1)];
        expected.extend_from_slice(&input);
        return Err(Error::ShapeMismatch { expected, actual: shape.to_vec() });
    }
    Ok(shape[0])
}

pub(crate) fn forward_sample(ops: &[Op], flat: &[f64], offsets: &[Option<(usize, usize)>], x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(ops.len() + 1);
    acts.push(x.to_vec());
    for (i, op) in ops.iter().enumerate() {
        let input = &acts[i];
        let mut out = vec![0.0; op.output_len()];
        match *op {
            Op::Dense { inputs, outputs } => {
                let (wo, bo) = offsets[i].expect("dense layer has parameters");
                let w = &flat[wo..wo + inputs * outputs];
                let b = &flat[bo..bo + outputs];
                for (o, y) in out.iter_mut().enumerate() {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    *y = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Conv2d { in_c, out_c, k, in_h, in_w } => {
                let (wo, bo) = offsets[i].expect("conv layer has parameters");
                let (oh, ow) = (in_h - k + 1, in_w - k + 1);
                for o in 0..out_c {
                    let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
                    plane.fill(flat[bo + o]);
                    for c in 0..in_c {
                        let src = &input[c * in_h * in_w..(c + 1) * in_h * in_w];
                        for p in 0..k {
                            for q in 0..k {
                                let wv = flat[wo + ((o * in_c + c) * k + p) * k + q];
                                for r in 0..oh {
                                    let srow = &src[(r + p) * in_w + q..(r + p) * in_w + q + ow];
                                    let drow = &mut plane[r * ow..(r + 1) * ow];
                                    for (d, s) in drow.iter_mut().zip(srow) {
                                        *d += wv * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool { c, in_h, in_w, size } => {
                let (oh, ow) = (in_h / size, in_w / size);
                let norm = 1.0 / (size * size) as f64;
                for ch in 0..c {
                    for r in 0..oh {
                        for col in 0..ow {
                            let mut sum = 0.0;
                            for p in 0..size {
                                let base = ch * in_h * in_w + (r * size + p) * in_w + col * size;
                                sum += input[base..base + size].iter().sum::<f64>();
                            }
                            out[(ch * oh + r) * ow + col] = sum * norm;
                        }
                    }
                }
            }
            Op::Act { function, .. } => {
                for (y, &x) in out.iter_mut().zip(input) {
                    *y = function.apply(x);
                }
            }
        }
        acts.push(out);
    }
    acts
}

/// Accumulates parameter gradients of one sample into `grad` and returns the
/// gradient with respect to the sample input when `want_input` is set.
pub(crate) fn backward_sample(
    ops: &[Op],
    flat: &[f64],
    offsets: &[Option<(usize, usize)>],
    acts: &[Vec<f64>],
    dlogits: Vec<f64>,
    grad: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let mut delta = dlogits;
    for (i, op) in ops.iter().enumerate().rev() {
        let input = &acts[i];
        let need_dx = want_input || i > 0;
        match *op {
            Op::Dense { inputs, outputs } => {
                let (wo, bo) = offsets[i].expect("dense layer has parameters");
                let mut dx = if need_dx { vec![0.0; inputs] } else { Vec::new() };
                for o in 0..outputs {
                    let d = delta[o];
                    grad[bo + o] += d;
                    if d == 0.0 {
                        continue;
                    }
                    let gw = &mut grad[wo + o * inputs..wo + (o + 1) * inputs];
                    for (g, x) in gw.iter_mut().zip(input) {
                        *g += d * x;
                    }
                    if need_dx {
                        let w = &flat[wo + o * inputs..wo + (o + 1) * inputs];
                        for (dxi, wv) in dx.iter_mut().zip(w) {
                            *dxi += d * wv;
                        }
                    }
                }
                delta = dx;
            }
            Op::Conv2d { in_c, out_c, k, in_h, in_w } => {
                let (wo, bo) = offsets[i].expect("conv layer has parameters");
                let (oh, ow) = (in_h - k + 1, in_w - k + 1);
                let mut dx = if need_dx { vec![0.0; in_c * in_h * in_w] } else { Vec::new() };
                for o in 0..out_c {
                    let dplane = &delta[o * oh * ow..(o + 1) * oh * ow];
                    grad[bo + o] += dplane.iter().sum::<f64>();
                    for c in 0..in_c {
                        let src = &input[c * in_h * in_w..(c + 1) * in_h * in_w];
                        for p in 0..k {
                            for q in 0..k {
                                let widx = wo + ((o * in_c + c) * k + p) * k + q;
                                let mut acc = 0.0;
                                for r in 0..oh {
                                    let srow = &src[(r + p) * in_w + q..(r + p) * in_w + q + ow];
                                    let drow = &dplane[r * ow..(r + 1) * ow];
                                    acc += srow.iter().zip(drow).map(|(a, b)| a * b).sum::<f64>();
                                }
                                grad[widx] += acc;
                                if need_dx {
                                    let wv = flat[widx];
                                    let dst = &mut dx[c * in_h * in_w..(c + 1) * in_h * in_w];
                                    for r in 0..oh {
                                        let start = (r + p) * in_w + q;
                                        let drow = &dplane[r * ow..(r + 1) * ow];
                                        for (t, d) in dst[start..start + ow].iter_mut().zip(drow) {
                                            *t += wv * d;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                delta = dx;
            }
            Op::AvgPool { c, in_h, in_w, size } => {
                let (oh, ow) = (in_h / size, in_w / size);
                let norm = 1.0 / (size * size) as f64;
                let mut dx = vec![0.0; c * in_h * in_w];
                for ch in 0..c {
                    for r in 0..oh {
                        for col in 0..ow {
                            let d = delta[(ch * oh + r) * ow + col] * norm;
                            for p in 0..size {
                                let base = ch * in_h * in_w + (r * size + p) * in_w + col * size;
                                for t in &mut dx[base..base + size] {
                                    *t = d;
                                }
                            }
                        }
                    }
                }
                delta = dx;
            }
            Op::Act { function, .. } => {
                let output = &acts[i + 1];
                for ((d, &x), &y) in delta.iter_mut().zip(input).zip(output) {
                    *d *= function.derivative(x, y);
                }
            }
        }
    }
    want_input.then_some(delta)
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Runs the network on a batch shaped `(B, C, H, W)` (or `(B, C*H*W)`).
pub fn forward(spec: &ModelSpec, params: &ModelParams, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let b = check_batch(spec, batch)?;
    let offsets = param_offsets(spec, params)?;
    let acts: Vec<Vec<Vec<f64>>> = (0..b)
        .map(|s| forward_sample(spec.ops(), &params.flat, &offsets, batch.row(s)))
        .collect();
    let k = spec.num_classes();
    let mut logits = Vec::with_capacity(b * k);
    for a in &acts {
        logits.extend_from_slice(a.last().expect("non-empty network"));
    }
    let logits = Tensor::new(vec![b, k], logits)?;
    Ok((logits, ForwardCache { acts, input_shape: batch.shape().to_vec() }))
}

/// Mean softmax cross-entropy against class labels and its gradient with
/// respect to every parameter and to the input batch.
pub fn backward(spec: &ModelSpec, params: &ModelParams, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, Gradient)> {
    let k = spec.num_classes();
    if labels.len() != cache.batch_size() {
        return Err(Error::LengthMismatch { expected: cache.batch_size(), actual: labels.len() });
    }
    let mut targets = vec![0.0; labels.len() * k];
    for (s, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        targets[s * k + label] = 1.0;
    }
    backward_soft(spec, params, cache, &targets)
}

/// Same as [`backward`] with per-sample target distributions (row-major
/// `B x K`); the loss is `-sum_k y_k log softmax_k`, averaged over the batch.
pub fn backward_soft(spec: &ModelSpec, params: &ModelParams, cache: &ForwardCache, targets: &[f64]) -> Result<(f64, Gradient)> {
    backward_impl(spec, params, cache, targets, true)
}

pub(crate) fn backward_impl(
    spec: &ModelSpec,
    params: &ModelParams,
    cache: &ForwardCache,
    targets: &[f64],
    want_input: bool,
) -> Result<(f64, Gradient)> {
    let k = spec.num_classes();
    let b = cache.batch_size();
    if targets.len() != b * k {
        return Err(Error::LengthMismatch { expected: b * k, actual: targets.len() });
    }
    let offsets = param_offsets(spec, params)?;
    let mut grad = vec![0.0; params.flat.len()];
    let mut loss = 0.0;
    let mut dinput = Vec::with_capacity(if want_input { b * spec.input_len() } else { 0 });
    let scale = 1.0 / b as f64;
    for (s, acts) in cache.acts.iter().enumerate() {
        let logits = acts.last().expect("non-empty network");
        let target = &targets[s * k..(s + 1) * k];
        let logp = log_softmax(logits);
        loss -= target.iter().zip(&logp).map(|(y, lp)| y * lp).sum::<f64>();
        let tsum: f64 = target.iter().sum();
        let dlogits = logp.iter().zip(target).map(|(lp, y)| (tsum * lp.exp() - y) * scale).collect();
        if let Some(dx) = backward_sample(spec.ops(), &params.flat, &offsets, acts, dlogits, &mut grad, want_input) {
            dinput.extend(dx);
        }
    }
    let input = if want_input { Some(Tensor::new(cache.input_shape.clone(), dinput)?) } else { None };
    Ok((loss * scale, Gradient { params: grad, input }))
}

/// Index of the largest logit for every sample.
pub fn predict(spec: &ModelSpec, params: &ModelParams, batch: &Tensor) -> Result<Vec<usize>> {
    let (logits, _) = forward(spec, params, batch)?;
    let k = spec.num_classes();
    Ok(logits
        .values()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::init_params;
    use crate::nn::spec::{Activation, LayerKind};

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = ModelSpec::mlp([1, 2, 3], &[4], 3, Activation::Tanh).unwrap();
        let params = ModelParams::zeros(&spec);
        let x = Tensor::new(vec![2, 1, 2, 3], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let (logits, _) = forward(&spec, &params, &x).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert!(logits.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_weight_dense() {
        let spec = ModelSpec::new([1, 1, 1], vec![LayerKind::Dense { units: 1 }]).unwrap();
        let params = ModelParams::from_flat(&spec, vec![2.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let (logits, _) = forward(&spec, &params, &x).unwrap();
        assert_eq!(logits.values(), &[6.0]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let spec = ModelSpec::mlp([1, 1, 4], &[], 5, Activation::Tanh).unwrap();
        let params = ModelParams::zeros(&spec);
        let x = Tensor::new(vec![3, 4], vec![0.5; 12]).unwrap();
        let (_, cache) = forward(&spec, &params, &x).unwrap();
        let (loss, _) = backward(&spec, &params, &cache, &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_and_label_errors() {
        let spec = ModelSpec::mlp([1, 2, 2], &[3], 2, Activation::Relu).unwrap();
        let params = init_params(&spec, 3);
        let bad = Tensor::new(vec![1, 1, 2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(forward(&spec, &params, &bad), Err(Error::ShapeMismatch { .. })));
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.1; 4]).unwrap();
        let (_, cache) = forward(&spec, &params, &x).unwrap();
        assert!(matches!(backward(&spec, &params, &cache, &[2]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        for logits in [vec![1000.0, -1000.0, 3.0], vec![0.0; 7], vec![-3.5, 2.25]] {
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
