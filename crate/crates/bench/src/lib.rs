//! Fixtures shared by the criterion benchmarks in `benches/`.

pub use ifl_core::*;

use ifl_core::data::{make_toy_dataset, LabeledImage};
use ifl_core::nn::{init_params, Activation, ModelParams, ModelSpec};

/// Toy CNN on `size` pixel RGB inputs with ten classes, its initial
/// parameters and a balanced toy sample set.
pub fn toy_fixture(size: usize, per_class: usize) -> (ModelSpec, ModelParams, Vec<LabeledImage>) {
    let spec = ModelSpec::toy_cnn(3, size, 10, Activation::Tanh).expect("valid toy spec");
    let params = init_params(&spec, 1);
    let data = make_toy_dataset(10, per_class, size, 2).expect("valid toy data");
    (spec, params, data)
}
