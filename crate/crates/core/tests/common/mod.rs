#![allow(dead_code)]

use demt_core::data::{generate_dataset, Batch};
use demt_core::model::{ModelConfig, TaskKind, TaskSpec, Variant};
use demt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALL_TASKS: [TaskKind; 3] = [TaskKind::Semseg, TaskKind::Depth, TaskKind::Normal];

pub fn small_config(variant: Variant, tasks: &[TaskKind]) -> ModelConfig {
    ModelConfig {
        tasks: tasks
            .iter()
            .map(|&k| TaskSpec::new(k, 4, 1.0).unwrap())
            .collect(),
        reduced_channels: 4,
        depth: 1,
        points: 9,
        heads: 2,
        scales: vec![4, 8],
        input_hw: (32, 32),
        trunk_widths: [4, 4, 4, 4],
        variant,
        seed: 5,
        ln_eps: 1e-5,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Synthetic batch of `b` scenes at `h×w` with 4 classes.
pub fn scene_batch(b: usize, h: usize, w: usize, seed: u64) -> Batch {
    let ds = generate_dataset(seed, b, h, w, 4, "train").unwrap();
    let samples: Vec<_> = ds.samples.iter().collect();
    Batch::from_samples(&samples, (0..b).collect()).unwrap()
}
