//! Minimal reverse-mode automatic differentiation: dense tensors, a
//! single-shot tape, Adam, and deterministic parameter initialization.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, VarId, MASK_FILL};
pub use tensor::Tensor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform init in `[-scale, scale]`. A zero scale yields a zero tensor.
pub fn param_init(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            if scale == 0.0 {
                0.0
            } else {
                rng.gen_range(-scale..=scale)
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data constructed consistently")
}

/// Default init scale: 1/sqrt(fan_in).
pub fn fan_in_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}
