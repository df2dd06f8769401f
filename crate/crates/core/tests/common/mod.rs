#![allow(dead_code)]

pub mod flow;
pub mod gradsuite;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use labelemb::Tensor;

/// Uniform entries in `[-2, 2]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Like [`uniform`] but keeps every entry at least `margin` away from 0.
pub fn uniform_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let mut t = uniform(rng, shape);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
    t
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..m)).collect()
}

/// All entries exactly zero, or no gradient at all.
pub fn bitwise_zero(g: Option<&[f64]>) -> bool {
    g.is_none_or(|g| g.iter().all(|&v| v == 0.0))
}
