//! Differentiable co-occurrence consistency loss.
//!
//! `L = sum |C_g - C_r|` over every entry of the downsampled tensors, where
//! `C_g` is computed from the generated pixels through the soft assignment,
//! the windowed pair sums, the per-pixel normalisation and the block
//! average. The palette is held fixed; the gradient flows to the pixels.

use ndarray::{Array3, ArrayView3};

use super::fast::{pair_sums, pair_sums_adjoint, pairs};
use super::tensor::{block_average, normalize_pair_sums};
use super::{CoocParams, CoocTensor, Palette, Z_FLOOR};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CoocLoss {
    pub value: f64,
    /// `dL / d pixel`, shaped like the generated image `(H, W, 3)`.
    pub grad: Array3<f64>,
    /// The generated image's own tensor.
    pub generated: CoocTensor,
}

fn check_shapes(generated: ArrayView3<f64>, target: &CoocTensor, palette: &Palette) -> Result<()> {
    crate::imageio::check_rgb(generated)?;
    let (h, w, _) = generated.dim();
    let (ph, pw) = target.pixel_dim();
    if (h, w) != (ph, pw) {
        return Err(Error::shape(format!("{ph}x{pw} pixels"), format!("{h}x{w}")));
    }
    if target.k() != palette.k() {
        return Err(Error::shape(format!("k = {}", palette.k()), format!("k = {}", target.k())));
    }
    Ok(())
}

/// Forward-only loss value.
pub fn cooc_loss_value(generated: ArrayView3<f64>, target: &CoocTensor, palette: &Palette, params: &CoocParams) -> Result<f64> {
    check_shapes(generated, target, palette)?;
    let g = super::cooc_tensor_unchecked(generated, palette, params, target.s())?;
    g.l1_distance(target)
}

/// Loss value and its gradient with respect to the generated pixels.
///
/// Normalisers below the degeneracy floor are clamped (and treated as
/// constant in the backward pass) rather than reported as errors.
pub fn cooc_loss(generated: ArrayView3<f64>, target: &CoocTensor, palette: &Palette, params: &CoocParams) -> Result<CoocLoss> {
    check_shapes(generated, target, palette)?;
    params.validate()?;
    let k = palette.k();
    let s = target.s();
    let (h, w, _) = generated.dim();

    let maps = palette.assignment_maps(generated);
    let sums = pair_sums(&maps, params);
    let (volume, z) = normalize_pair_sums(&sums, k, false)?;
    let c_g = block_average(&volume, s);

    let target_v = target.values();
    let value: f64 = c_g.iter().zip(target_v.iter()).map(|(a, b)| (a - b).abs()).sum();

    // dL/dM per pixel: sign of the cell it averages into, divided by s^2.
    let inv_area = 1.0 / (s * s) as f64;
    let pair_list = pairs(k);
    let mut upstream = Array3::<f64>::zeros((pair_list.len(), h, w));
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = (y / s, x / s);
            let sign = |c: usize| {
                let d = c_g[[ty, tx, c]] - target_v[[ty, tx, c]];
                if d > 0.0 {
                    inv_area
                } else if d < 0.0 {
                    -inv_area
                } else {
                    0.0
                }
            };
            let zz = z[[y, x]];
            // sum_ab dM_ab * M_ab, used by the normaliser's derivative
            let mut dot = 0.0;
            for c in 0..k * k {
                dot += sign(c) * volume[[y, x, c]];
            }
            let floored = zz <= Z_FLOOR;
            for (q, &(a, b)) in pair_list.iter().enumerate() {
                let (g_q, mult) = if a == b {
                    (sign(a * k + a), 1.0)
                } else {
                    (sign(a * k + b) + sign(b * k + a), 2.0)
                };
                upstream[[q, y, x]] = if floored { g_q / zz } else { (g_q - mult * dot) / zz };
            }
        }
    }

    let d_maps = pair_sums_adjoint(&maps, &upstream, params);

    // Through the soft assignment: dA_l/dx_i = A_l * -2 (x_i - c_i) / s_i^2.
    let mut grad = Array3::<f64>::zeros((h, w, 3));
    let centers = palette.centers();
    let spreads = palette.spreads();
    for y in 0..h {
        for x in 0..w {
            for l in 0..k {
                let coef = d_maps[[l, y, x]] * maps[[l, y, x]];
                if coef == 0.0 {
                    continue;
                }
                for i in 0..3 {
                    let sd = spreads[l][i];
                    grad[[y, x, i]] += coef * -2.0 * (generated[[y, x, i]] - centers[l][i]) / (sd * sd);
                }
            }
        }
    }

    Ok(CoocLoss {
        value,
        grad,
        generated: CoocTensor::from_values(c_g, s)?,
    })
}
