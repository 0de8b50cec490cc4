//! Fixtures shared by the benchmarks.

use grid_core::data::{generate_multilabel, Batch};
use grid_core::model::sample_eps;
use grid_core::{GridModel, ModelConfig, TaskSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, v).unwrap()
}

/// Default-sized scene model with one batch of `batch` samples and its noise.
pub fn scene_step(batch: usize) -> (GridModel, Batch, Tensor) {
    let (n_classes, feature_dim) = (8, 32);
    let config = ModelConfig {
        input_dim: feature_dim,
        task: TaskSpec::MultiLabel { classes: n_classes },
        ..ModelConfig::default()
    };
    let model = GridModel::seeded(config, 1).unwrap();
    let data = generate_multilabel(batch, n_classes, feature_dim, 2).unwrap();
    let indices: Vec<usize> = (0..batch).collect();
    let b = data.batch(&indices).unwrap();
    let eps = sample_eps(&mut ChaCha8Rng::seed_from_u64(3), batch, model.config().latent_dim);
    (model, b, eps)
}
