use ifl_core::data::*;
use ifl_core::nn::*;

#[test]
fn toy_set_is_linearly_separable() {
    let pool = make_toy_dataset(10, 30, 16, 3).unwrap();
    let spec = ModelSpec::mlp([3, 16, 16], &[], 10, Activation::Tanh).unwrap();
    let trained = train_local(&spec, &init_params(&spec, 1), &pool, &LocalTraining { epochs: 30, batch_size: 16, lr: 0.05 }, 2).unwrap();
    let acc = accuracy(&spec, &trained, &pool).unwrap();
    assert!(acc > 90.0, "train accuracy {acc}");
}

fn class_counts(pool: &[LabeledImage], plan: &PartitionPlan) -> Vec<Vec<usize>> {
    plan.apply(pool).iter().map(|c| class_histogram(c, 10)).collect()
}

#[test]
fn huge_alpha_is_nearly_uniform() {
    let pool = make_toy_dataset(10, 30, 8, 1).unwrap();
    for seed in 0..10 {
        let plan = partition_dirichlet(&pool, 3, 1e6, seed).unwrap();
        for client in class_counts(&pool, &plan) {
            for count in client {
                assert!(count.abs_diff(10) <= 2, "seed {seed}: {count}");
            }
        }
    }
}

#[test]
fn small_alpha_starves_some_client_of_some_class() {
    let pool = make_toy_dataset(10, 30, 8, 2).unwrap();
    for seed in 0..10 {
        let counts = class_counts(&pool, &partition_dirichlet(&pool, 3, 0.5, seed).unwrap());
        let starved = counts.iter().flatten().any(|&c| (c as f64) < 0.1 * 30.0);
        assert!(starved, "seed {seed}: {counts:?}");
    }
}
