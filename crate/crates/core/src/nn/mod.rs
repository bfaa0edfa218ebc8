//! A small CPU convolution engine with hand-written gradients.
//!
//! Activations are `(N, C, H, W)` arrays. Parameters are exposed as flat
//! slices so optimisers and checkpoints can treat every layer alike.

mod activation;
mod adam;
mod batchnorm;
mod conv;

pub use activation::Activation;
pub use adam::Adam;
pub use batchnorm::{BatchNorm2d, BnCache};
pub use conv::{
    concat_channels, conv2d, conv2d_input_grad, conv2d_weight_grad, split_channels, upsample_nearest, Conv2d,
    ConvGeometry,
};

/// Gradients for a parameter list, in the same order and with the same
/// lengths as the parameter slices.
pub type Grads = Vec<Vec<f64>>;

pub trait Parameters {
    fn parameters(&self) -> Vec<&[f64]>;
    fn parameters_mut(&mut self) -> Vec<&mut [f64]>;

    /// Zero-filled gradient buffers shaped like the parameters.
    fn zero_grads(&self) -> Grads {
        self.parameters().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

/// `acc += other`, elementwise over matching gradient lists.
pub fn accumulate(acc: &mut Grads, other: &Grads) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(o) {
            *x += y;
        }
    }
}

pub fn scale(grads: &mut Grads, factor: f64) {
    for g in grads.iter_mut().flatten() {
        *g *= factor;
    }
}

pub fn all_finite(grads: &Grads) -> bool {
    grads.iter().flatten().all(|g| g.is_finite())
}
