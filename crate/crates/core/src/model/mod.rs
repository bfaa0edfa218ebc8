//! The conditional generator and critic.

mod checkpoint;
mod critic;
mod generator;
mod noise;

pub use checkpoint::{Checkpoint, TrainingState, CHECKPOINT_MAGIC};
pub use critic::{Critic, CriticConfig, CriticTrace, GradientPenalty};
pub use generator::{Generator, GeneratorConfig, GeneratorTrace};
pub use noise::{standard_normal, NoiseTensor};

use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Stacks `(H, W, C)` arrays into an `(N, C, H, W)` batch.
pub fn to_batch<'a>(items: impl IntoIterator<Item = ArrayView3<'a, f64>>) -> Result<Array4<f64>> {
    let views: Vec<_> = items.into_iter().collect();
    let first = views.first().ok_or_else(|| Error::invalid("empty batch"))?.dim();
    let mut out = Array4::zeros((views.len(), first.2, first.0, first.1));
    for (i, v) in views.iter().enumerate() {
        if v.dim() != first {
            return Err(Error::shape(format!("{first:?}"), format!("{:?}", v.dim())));
        }
        out.index_axis_mut(Axis(0), i).assign(&v.view().permuted_axes([2, 0, 1]));
    }
    Ok(out)
}

/// Sample `i` of an `(N, C, H, W)` batch as `(H, W, C)`.
pub fn from_batch(batch: &Array4<f64>, i: usize) -> Array3<f64> {
    batch
        .index_axis(Axis(0), i)
        .permuted_axes([1, 2, 0])
        .as_standard_layout()
        .into_owned()
}

pub(crate) fn assign_parameters(dst: Vec<&mut [f64]>, src: &[Vec<f64>], what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::format(what, format!("expected {} tensors, found {}", dst.len(), src.len())));
    }
    for (i, (d, s)) in dst.into_iter().zip(src).enumerate() {
        if d.len() != s.len() {
            return Err(Error::format(what, format!("tensor {i}: expected {} values, found {}", d.len(), s.len())));
        }
        d.copy_from_slice(s);
    }
    Ok(())
}
