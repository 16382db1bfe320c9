//! Seeded random initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::kernels::Matrix;

use super::{ModelBundle, ModelConfig};

pub const INIT_STD: f64 = 0.02;

/// Draws every weight from N(0, 0.02²) in container order from one
/// ChaCha8 stream seeded with `seed`. Norm gains are 1 and MLP biases are 0;
/// neither consumes random draws.
pub fn seeded_random_model(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let tensors = ModelBundle::directory(config)
        .into_iter()
        .map(|(name, rows, cols)| {
            if name.ends_with("norm") {
                Matrix::filled(rows, cols, 1.0)
            } else if name.ends_with("bias") {
                Matrix::zeros(rows, cols)
            } else {
                let data = (0..rows * cols)
                    .map(|_| normal.sample(&mut rng) as f32)
                    .collect();
                Matrix::from_vec(rows, cols, data).expect("shape from directory")
            }
        })
        .collect();
    ModelBundle::from_tensors(config.clone(), tensors)
}
