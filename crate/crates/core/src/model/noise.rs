use ndarray::{Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::seed;

/// I.i.d. standard normal noise of shape `(H, W, d_z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTensor {
    values: Array3<f64>,
    seed: u64,
}

impl NoiseTensor {
    pub fn sample(h: usize, w: usize, channels: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "noise");
        let values = Array3::from_shape_simple_fn((h, w, channels), || rng.sample(StandardNormal));
        Self { values, seed }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// As a single-sample `(1, d_z, H, W)` batch.
    pub fn to_batch(&self) -> Array4<f64> {
        super::to_batch([self.values.view()]).expect("one item")
    }
}

pub fn standard_normal(shape: (usize, usize, usize, usize), rng: &mut impl Rng) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}
