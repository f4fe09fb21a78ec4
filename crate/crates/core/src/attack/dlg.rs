use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::EncryptionMask;
use crate::error::{Error, Result};
use crate::nn::{backward, backward_soft, forward, log_softmax, sgd_step, softmax, ModelParams, ModelSpec};
use crate::tensor::Tensor;

/// What an honest-but-curious server sees of one client update: its view of
/// the model it broadcast, the model it got back and the coordinates it can
/// read in both. Unobservable coordinates of `before` hold the server's best
/// guess and are used as-is when replaying the client's forward pass.
#[derive(Debug, Clone)]
pub struct AttackTarget {
    pub spec: ModelSpec,
    pub before: ModelParams,
    pub after: ModelParams,
    pub observable: Vec<bool>,
    pub lr: f64,
}

impl AttackTarget {
    /// Observable coordinates are the ones the mask leaves in plaintext.
    pub fn from_mask(spec: ModelSpec, before: ModelParams, after: ModelParams, mask: &EncryptionMask, lr: f64) -> Self {
        let observable = mask.bits().iter().map(|b| !b).collect();
        Self { spec, before, after, observable, lr }
    }

    pub fn unmasked(spec: ModelSpec, before: ModelParams, after: ModelParams, lr: f64) -> Self {
        let observable = vec![true; before.len()];
        Self { spec, before, after, observable, lr }
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }
}

/// Gradient estimate on the observable coordinates; `values` is 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct InferredGradient {
    pub values: Vec<f64>,
    pub present: Vec<bool>,
}

impl InferredGradient {
    pub fn observed_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

/// `(before - after) / lr` on every observable coordinate.
pub fn infer_gradient(target: &AttackTarget) -> Result<InferredGradient> {
    if !(target.lr > 0.0) || !target.lr.is_finite() {
        return Err(Error::InvalidArgument(format!("client learning rate must be positive, got {}", target.lr)));
    }
    let n = target.before.len();
    if target.after.len() != n {
        return Err(Error::LengthMismatch { expected: n, actual: target.after.len() });
    }
    if target.observable.len() != n {
        return Err(Error::LengthMismatch { expected: n, actual: target.observable.len() });
    }
    let values = (0..n)
        .map(|i| if target.observable[i] { (target.before.flat[i] - target.after.flat[i]) / target.lr } else { 0.0 })
        .collect();
    Ok(InferredGradient { values, present: target.observable.clone() })
}

/// One SGD step of a client holding a single labelled image.
pub fn simulate_client_step(spec: &ModelSpec, params: &ModelParams, image: &Tensor, label: usize, lr: f64) -> Result<ModelParams> {
    let x = Tensor::stack([image])?;
    let (_, cache) = forward(spec, params, &x)?;
    let (_, g) = backward(spec, params, &cache, &[label])?;
    sgd_step(params, &g.params, lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Limited-memory BFGS with a backtracking line search.
    Lbfgs,
    /// Adam with the dummy image clamped to `[0, 1]` after every step.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DlgConfig {
    /// Number of matching-gradient evaluations.
    pub iterations: usize,
    pub optimizer: Optimizer,
    /// Adam step size, or the length of the first L-BFGS step.
    pub step: f64,
    /// L-BFGS memory.
    pub history: usize,
    /// Relative size of the finite-difference probe along the residual.
    pub probe: f64,
    pub seed: u64,
}

impl Default for DlgConfig {
    fn default() -> Self {
        Self { iterations: 300, optimizer: Optimizer::Lbfgs, step: 0.05, history: 20, probe: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub image: Tensor,
    pub label_probs: Vec<f64>,
    pub matching_loss: f64,
    pub iterations: usize,
    pub diverged: bool,
}

impl AttackResult {
    pub fn label(&self) -> usize {
        self.label_probs.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &p)| if p > b.1 { (i, p) } else { b }).0
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Matching loss and its gradient with respect to the dummy image and the
/// label logits.
pub(crate) struct Matching {
    pub loss: f64,
    pub d_image: Vec<f64>,
    pub d_logits: Vec<f64>,
}

/// `D = sum_obs (g(x, y) - g_hat)^2` with `g = dL/dW` and `y = softmax(z)`.
///
/// `dD/dx = d/dx [r . dL/dW]` for the masked residual `r = 2 (g - g_hat)`;
/// the inner product is the directional derivative of `L` along `r`, taken
/// as a central difference between `W + h r` and `W - h r`.
pub(crate) fn matching_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    target: &InferredGradient,
    image: &[f64],
    logits: &[f64],
    probe: f64,
) -> Result<Matching> {
    let x = Tensor::new(vec![1, spec.input_len()], image.to_vec())?;
    let y = softmax(logits);
    let (_, cache) = forward(spec, params, &x)?;
    let (_, g) = backward_soft(spec, params, &cache, &y)?;
    let mut loss = 0.0;
    let mut r = vec![0.0; g.params.len()];
    for i in 0..r.len() {
        if target.present[i] {
            let d = g.params[i] - target.values[i];
            loss += d * d;
            r[i] = 2.0 * d;
        }
    }
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Ok(Matching { loss, d_image: vec![0.0; image.len()], d_logits: vec![0.0; logits.len()] });
    }
    let h = probe / norm;
    let shifted = |sign: f64| -> Result<(Vec<f64>, Vec<f64>)> {
        let flat = params.flat.iter().zip(&r).map(|(w, ri)| w + sign * h * ri).collect();
        let p = ModelParams { flat, layout: params.layout.clone() };
        let (out, cache) = forward(spec, &p, &x)?;
        let (_, gp) = backward_soft(spec, &p, &cache, &y)?;
        let dx = gp.input.expect("input gradient requested").into_values();
        Ok((dx, log_softmax(out.values())))
    };
    let (dx_plus, lp_plus) = shifted(1.0)?;
    let (dx_minus, lp_minus) = shifted(-1.0)?;
    let d_image = dx_plus.iter().zip(&dx_minus).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    let d_y: Vec<f64> = lp_plus.iter().zip(&lp_minus).map(|(a, b)| -(a - b) / (2.0 * h)).collect();
    let dot: f64 = y.iter().zip(&d_y).map(|(p, d)| p * d).sum();
    let d_logits = y.iter().zip(&d_y).map(|(p, d)| p * (d - dot)).collect();
    Ok(Matching { loss, d_image, d_logits })
}

fn matching_loss(spec: &ModelSpec, params: &ModelParams, target: &InferredGradient, image: &[f64], logits: &[f64]) -> Result<f64> {
    let x = Tensor::new(vec![1, spec.input_len()], image.to_vec())?;
    let (_, cache) = forward(spec, params, &x)?;
    let (_, g) = backward_soft(spec, params, &cache, &softmax(logits))?;
    Ok((0..g.params.len()).filter(|&i| target.present[i]).map(|i| (g.params[i] - target.values[i]).powi(2)).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Search direction `-H g` from the stored curvature pairs.
fn lbfgs_direction(g: &[f64], pairs: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let a = dot(s, &q) / dot(y, s);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y)) = pairs.last() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = dot(y, &q) / dot(y, s);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

struct Search<'a> {
    target: &'a AttackTarget,
    inferred: InferredGradient,
    probe: f64,
    best: (f64, Vec<f64>),
    evaluations: usize,
}

impl Search<'_> {
    fn split<'v>(&self, v: &'v [f64]) -> (&'v [f64], &'v [f64]) {
        v.split_at(self.target.spec.input_len())
    }

    fn record(&mut self, loss: f64, v: &[f64]) {
        if loss < self.best.0 {
            self.best = (loss, v.to_vec());
        }
    }

    fn loss(&mut self, v: &[f64]) -> Result<f64> {
        let (x, z) = self.split(v);
        let loss = matching_loss(&self.target.spec, &self.target.before, &self.inferred, x, z)?;
        self.record(loss, v);
        Ok(loss)
    }

    /// Loss and gradient, or `None` once anything is non-finite.
    fn gradient(&mut self, v: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        self.evaluations += 1;
        let (x, z) = self.split(v);
        let m = matching_gradient(&self.target.spec, &self.target.before, &self.inferred, x, z, self.probe)?;
        if !m.loss.is_finite() || m.d_image.iter().chain(&m.d_logits).any(|g| !g.is_finite()) {
            return Ok(None);
        }
        self.record(m.loss, v);
        let mut g = m.d_image;
        g.extend(m.d_logits);
        Ok(Some((m.loss, g)))
    }
}

/// Optimises a random dummy image and soft label so that their parameter
/// gradient matches the one inferred from `target`. Returns the iterate with
/// the lowest matching loss, clamped to `[0, 1]`.
pub fn dlg_attack(target: &AttackTarget, cfg: &DlgConfig) -> Result<AttackResult> {
    let inferred = infer_gradient(target)?;
    let spec = &target.spec;
    let (n, k) = (spec.input_len(), spec.num_classes());
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    v.extend((0..k).map(|_| rng.random::<f64>() * 0.1));
    let mut search = Search { target, inferred, probe: cfg.probe, best: (f64::INFINITY, v.clone()), evaluations: 0 };
    let diverged = match cfg.optimizer {
        Optimizer::Adam => run_adam(&mut search, v, cfg)?,
        Optimizer::Lbfgs => run_lbfgs(&mut search, v, cfg)?,
    };
    let (loss, best) = search.best;
    let (x, z) = best.split_at(n);
    let [c, h, w] = spec.input_shape();
    Ok(AttackResult {
        image: Tensor::new(vec![c, h, w], x.iter().map(|p| p.clamp(0.0, 1.0)).collect())?,
        label_probs: softmax(z),
        matching_loss: loss,
        iterations: search.evaluations,
        diverged,
    })
}

fn run_adam(search: &mut Search, mut v: Vec<f64>, cfg: &DlgConfig) -> Result<bool> {
    let n = search.target.spec.input_len();
    let mut adam = Adam::new(v.len());
    for _ in 0..cfg.iterations {
        let Some((_, g)) = search.gradient(&v)? else { return Ok(true) };
        adam.step(&mut v, &g, cfg.step);
        for p in &mut v[..n] {
            *p = p.clamp(0.0, 1.0);
        }
    }
    Ok(false)
}

fn run_lbfgs(search: &mut Search, mut v: Vec<f64>, cfg: &DlgConfig) -> Result<bool> {
    const ARMIJO: f64 = 1e-4;
    const BACKTRACKS: usize = 30;
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(cfg.history);
    if cfg.iterations == 0 {
        return Ok(false);
    }
    let Some((mut f, mut g)) = search.gradient(&v)? else { return Ok(true) };
    while search.evaluations < cfg.iterations {
        let mut d = lbfgs_direction(&g, &pairs);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|x| -x).collect();
            slope = dot(&g, &d);
        }
        if slope == 0.0 {
            break;
        }
        let mut alpha = if pairs.is_empty() {
            cfg.step / d.iter().fold(0.0f64, |m, x| m.max(x.abs()))
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..BACKTRACKS {
            let trial: Vec<f64> = v.iter().zip(&d).map(|(x, di)| x + alpha * di).collect();
            let ft = search.loss(&trial)?;
            if ft.is_finite() && ft <= f + ARMIJO * alpha * slope {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        let Some(next) = accepted else {
            if pairs.is_empty() {
                break;
            }
            pairs.clear();
            continue;
        };
        let Some((fn_, gn)) = search.gradient(&next)? else { return Ok(true) };
        let s: Vec<f64> = next.iter().zip(&v).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == cfg.history.max(1) {
                pairs.remove(0);
            }
            pairs.push((s, y));
        }
        (v, f, g) = (next, fn_, gn);
    }
    Ok(false)
}
