use ifl_core::attack::*;
use ifl_core::crypto::build_mask;
use ifl_core::data::make_toy_dataset;
use ifl_core::nn::*;

#[test]
fn inferred_gradient_equals_client_gradient() {
    let spec = ModelSpec::toy_cnn(3, 16, 10, Activation::Tanh).unwrap();
    let before = init_params(&spec, 3);
    let sample = &make_toy_dataset(10, 1, 16, 4).unwrap()[5];
    let lr = 0.1;
    let after = simulate_client_step(&spec, &before, &sample.pixels, sample.label, lr).unwrap();
    let x = ifl_core::Tensor::stack([&sample.pixels]).unwrap();
    let (_, cache) = forward(&spec, &before, &x).unwrap();
    let (_, truth) = backward(&spec, &before, &cache, &[sample.label]).unwrap();
    let g = infer_gradient(&AttackTarget::unmasked(spec, before, after, lr)).unwrap();
    for (a, b) in g.values.iter().zip(&truth.params) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|v| v * v).sum::<f64>().sqrt() * b.iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[test]
fn linear_softmax_input_is_recovered() {
    let spec = ModelSpec::mlp([3, 8, 8], &[], 10, Activation::Tanh).unwrap();
    let before = init_params(&spec, 8);
    let sample = &make_toy_dataset(10, 1, 8, 2).unwrap()[3];
    let after = simulate_client_step(&spec, &before, &sample.pixels, sample.label, 0.1).unwrap();
    let result = dlg_attack(&AttackTarget::unmasked(spec, before, after, 0.1), &DlgConfig::default()).unwrap();
    let c = cosine(result.image.values(), sample.pixels.values());
    assert!(c > 0.99, "cosine {c}");
    assert_eq!(result.label(), sample.label);
}

#[test]
fn toy_cnn_unmasked_attack_recovers_image() {
    let spec = ModelSpec::toy_cnn(3, 32, 10, Activation::Tanh).unwrap();
    let before = init_params(&spec, 1);
    let sample = &make_toy_dataset(10, 1, 32, 6).unwrap()[2];
    let after = simulate_client_step(&spec, &before, &sample.pixels, sample.label, 0.1).unwrap();
    let cfg = DlgConfig { iterations: 500, ..Default::default() };
    let result = dlg_attack(&AttackTarget::unmasked(spec, before, after, 0.1), &cfg).unwrap();
    let s = msssim(&sample.pixels, &result.image).unwrap();
    assert!(s > 0.9, "msssim {s}");
}

#[test]
fn masking_lowers_attack_scores() {
    let spec = ModelSpec::toy_cnn(3, 32, 10, Activation::Tanh).unwrap();
    let before = init_params(&spec, 2);
    let victims = make_toy_dataset(10, 1, 32, 9).unwrap();
    let mask = build_mask(0.2, before.len(), None, 5).unwrap();
    let cfg = DlgConfig { iterations: 200, ..Default::default() };
    let mut best = [[0.0f64; 3]; 2];
    for v in victims.iter().take(4) {
        let after = simulate_client_step(&spec, &before, &v.pixels, v.label, 0.1).unwrap();
        let targets = [
            AttackTarget::unmasked(spec.clone(), before.clone(), after.clone(), 0.1),
            AttackTarget::from_mask(spec.clone(), before.clone(), after, &mask, 0.1),
        ];
        for (slot, t) in best.iter_mut().zip(&targets) {
            let s = score_images(&v.pixels, &dlg_attack(t, &cfg).unwrap().image).unwrap();
            slot[0] = slot[0].max(s.uqi);
            slot[1] = slot[1].max(s.msssim);
            slot[2] = slot[2].max(s.vif);
        }
    }
    for m in 0..3 {
        assert!(best[0][m] > best[1][m], "metric {m}: {:?}", best);
    }
}
