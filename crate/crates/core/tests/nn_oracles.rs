use ifl_core::data::make_toy_dataset;
use ifl_core::nn::*;
use ifl_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn random_batch(shape: [usize; 3], b: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = shape.iter().product::<usize>() * b;
    Tensor::new(vec![b, shape[0], shape[1], shape[2]], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn loss_at(spec: &ModelSpec, params: &ModelParams, x: &Tensor, labels: &[usize]) -> f64 {
    let (_, cache) = forward(spec, params, x).unwrap();
    backward(spec, params, &cache, labels).unwrap().0
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-5)
}

fn check_param_gradient(spec: &ModelSpec, batch: usize, seed: u64) {
    let params = init_params(spec, seed);
    let x = random_batch(spec.input_shape(), batch, seed + 1);
    let labels: Vec<usize> = (0..batch).map(|i| i % spec.num_classes()).collect();
    let (_, cache) = forward(spec, &params, &x).unwrap();
    let (_, grad) = backward(spec, &params, &cache, &labels).unwrap();
    let h = 1e-4;
    for i in 0..params.len() {
        let mut p = params.clone();
        p.flat[i] += h;
        let up = loss_at(spec, &p, &x, &labels);
        p.flat[i] -= 2.0 * h;
        let down = loss_at(spec, &p, &x, &labels);
        let fd = (up - down) / (2.0 * h);
        assert!(rel_err(grad.params[i], fd) < 1e-4, "param {i}: analytic {} vs fd {fd}", grad.params[i]);
    }
}

fn check_input_gradient(spec: &ModelSpec, seed: u64) {
    let params = init_params(spec, seed);
    let x = random_batch(spec.input_shape(), 2, seed + 1);
    let labels = [0, 1];
    let (_, cache) = forward(spec, &params, &x).unwrap();
    let (_, grad) = backward(spec, &params, &cache, &labels).unwrap();
    let dx = grad.input.expect("input gradient");
    let h = 1e-4;
    for i in 0..x.len() {
        let mut v = x.values().to_vec();
        v[i] += h;
        let up = loss_at(spec, &params, &Tensor::new(x.shape().to_vec(), v.clone()).unwrap(), &labels);
        v[i] -= 2.0 * h;
        let down = loss_at(spec, &params, &Tensor::new(x.shape().to_vec(), v).unwrap(), &labels);
        let fd = (up - down) / (2.0 * h);
        assert!(rel_err(dx.values()[i], fd) < 1e-4, "pixel {i}: analytic {} vs fd {fd}", dx.values()[i]);
    }
}

#[test]
fn mlp_logits_match_direct_matrix_product() {
    let spec = ModelSpec::mlp([1, 2, 3], &[5], 4, Activation::Tanh).unwrap();
    let params = init_params(&spec, 42);
    let blocks = params.unflatten();
    let (w1, b1, w2, b2) = (blocks[0].values(), blocks[1].values(), blocks[2].values(), blocks[3].values());
    let x = random_batch([1, 2, 3], 3, 7);
    let (logits, _) = forward(&spec, &params, &x).unwrap();
    for s in 0..3 {
        let input = &x.values()[s * 6..(s + 1) * 6];
        let hidden: Vec<f64> = (0..5).map(|o| (b1[o] + (0..6).map(|i| w1[o * 6 + i] * input[i]).sum::<f64>()).tanh()).collect();
        for o in 0..4 {
            let want = b2[o] + (0..5).map(|i| w2[o * 5 + i] * hidden[i]).sum::<f64>();
            assert!((logits.values()[s * 4 + o] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let spec = ModelSpec::mlp([1, 3, 3], &[6], 3, Activation::Tanh).unwrap();
    check_param_gradient(&spec, 8, 1);
}

#[test]
fn every_layer_kind_matches_finite_differences() {
    use LayerKind::*;
    for act in [Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
        let spec = ModelSpec::new(
            [2, 8, 8],
            vec![
                Conv2d { filters: 3, kernel: 3 },
                Act { function: act },
                AvgPool2d { size: 2 },
                Conv2d { filters: 2, kernel: 2 },
                Act { function: act },
                Dense { units: 5 },
                Act { function: act },
                Dense { units: 3 },
            ],
        )
        .unwrap();
        check_param_gradient(&spec, 4, 3);
        check_input_gradient(&spec, 5);
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let spec = ModelSpec::toy_cnn(3, 8, 2, Activation::Tanh).unwrap();
    check_input_gradient(&spec, 9);
    let mlp = ModelSpec::mlp([1, 4, 4], &[5], 3, Activation::Sigmoid).unwrap();
    check_input_gradient(&mlp, 11);
}

#[test]
fn soft_targets_match_finite_differences() {
    let spec = ModelSpec::mlp([1, 2, 2], &[3], 3, Activation::Tanh).unwrap();
    let params = init_params(&spec, 2);
    let x = random_batch([1, 2, 2], 1, 3);
    let targets = [0.2, 0.5, 0.3];
    let soft_loss = |p: &ModelParams| {
        let (_, cache) = forward(&spec, p, &x).unwrap();
        backward_soft(&spec, p, &cache, &targets).unwrap().0
    };
    let (_, cache) = forward(&spec, &params, &x).unwrap();
    let (_, grad) = backward_soft(&spec, &params, &cache, &targets).unwrap();
    for i in 0..params.len() {
        let mut p = params.clone();
        p.flat[i] += 1e-4;
        let up = soft_loss(&p);
        p.flat[i] -= 2e-4;
        let fd = (up - soft_loss(&p)) / 2e-4;
        assert!(rel_err(grad.params[i], fd) < 1e-4);
    }
}

#[test]
fn fifty_epochs_lower_the_loss() {
    let spec = ModelSpec::toy_cnn(3, 8, 4, Activation::Tanh).unwrap();
    let data = make_toy_dataset(4, 8, 8, 5).unwrap();
    assert_eq!(data.len(), 32);
    let start = init_params(&spec, 1);
    let before = evaluate_loss(&spec, &start, &data).unwrap();
    let trained = train_local(&spec, &start, &data, &LocalTraining { epochs: 50, batch_size: 8, lr: 0.05 }, 2).unwrap();
    let after = evaluate_loss(&spec, &trained, &data).unwrap();
    assert!(after < before, "{after} >= {before}");
}
