//! Co-occurrence statistics: palette quantisation, soft assignment,
//! per-patch matrices, per-pixel volumes, downsampled tensors, their
//! normalisation and the differentiable consistency loss.

mod fast;
pub mod loss;
mod matrix;
mod normalizer;
mod palette;
pub mod storage;
mod tensor;

pub use loss::{cooc_loss, CoocLoss};
pub use matrix::{cooc_matrix, CoocMatrix, CoocParams};
pub use normalizer::{Normalizer, STD_FLOOR};
pub use storage::CoocStats;
pub use palette::{fit_palette, Palette, REFERENCE_CLUSTER_COUNTS, SPREAD_FLOOR};
pub use tensor::{
    cooc_tensor, cooc_tensor_unchecked, cooc_volume, downsample_volume, CoocTensor, CoocVolume,
};

/// Floor on the normaliser `Z` below which statistics are considered
/// degenerate.
pub const Z_FLOOR: f64 = 1e-12;
