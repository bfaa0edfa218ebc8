use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

use super::fast::{pair_sums, pairs};
use super::{CoocMatrix, CoocParams, Palette, Z_FLOOR};
use crate::error::{Error, Result};

/// Per-pixel row-stacked co-occurrence matrices, `(H, W, k^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocVolume {
    values: Array3<f64>,
    k: usize,
}

/// Block-averaged co-occurrence volume, `(H / s, W / s, k^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocTensor {
    values: Array3<f64>,
    k: usize,
    s: usize,
}

fn k_from_channels(c: usize) -> Result<usize> {
    let k = (c as f64).sqrt().round() as usize;
    if k < 2 || k * k != c {
        return Err(Error::shape("k^2 channels with k >= 2", c));
    }
    Ok(k)
}

impl CoocVolume {
    pub fn from_values(values: Array3<f64>) -> Result<Self> {
        let k = k_from_channels(values.dim().2)?;
        Ok(Self { values, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        let (h, w, _) = self.values.dim();
        (h, w)
    }

    pub fn matrix_at(&self, y: usize, x: usize) -> CoocMatrix {
        matrix_of(self.values.slice(s![y, x, ..]).to_owned().into_raw_vec_and_offset().0, self.k)
    }
}

fn matrix_of(data: Vec<f64>, k: usize) -> CoocMatrix {
    CoocMatrix::from_raw(Array2::from_shape_vec((k, k), data).unwrap())
}

impl CoocTensor {
    /// Wraps raw values; positions are not re-validated (see [`Self::validate`]).
    pub fn from_values(values: Array3<f64>, s: usize) -> Result<Self> {
        let k = k_from_channels(values.dim().2)?;
        if s == 0 {
            return Err(Error::invalid("downsampling factor must be >= 1"));
        }
        Ok(Self { values, k, s })
    }

    /// A `1 x 1` tensor holding a single matrix.
    pub fn from_matrix(m: &CoocMatrix, s: usize) -> Result<Self> {
        let k = m.k();
        let values = Array3::from_shape_vec((1, 1, k * k), m.row_stacked()).unwrap();
        Self::from_values(values, s)
    }

    /// Tensor with `m` at every one of `h x w` positions.
    pub fn constant(m: &CoocMatrix, h: usize, w: usize, s: usize) -> Result<Self> {
        let row = m.row_stacked();
        let k2 = row.len();
        let values = Array3::from_shape_fn((h, w, k2), |(_, _, c)| row[c]);
        Self::from_values(values, s)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    /// Spatial size in tensor cells.
    pub fn dim(&self) -> (usize, usize) {
        let (h, w, _) = self.values.dim();
        (h, w)
    }

    /// Image size this tensor conditions.
    pub fn pixel_dim(&self) -> (usize, usize) {
        let (h, w) = self.dim();
        (h * self.s, w * self.s)
    }

    pub fn matrix_at(&self, y: usize, x: usize) -> CoocMatrix {
        matrix_of(self.values.slice(s![y, x, ..]).to_vec(), self.k)
    }

    pub fn matrix_view(&self, y: usize, x: usize) -> ArrayView2<'_, f64> {
        self.values
            .slice(s![y, x, ..])
            .into_shape_with_order((self.k, self.k))
            .expect("contiguous position")
    }

    pub fn set_matrix(&mut self, y: usize, x: usize, m: &CoocMatrix) -> Result<()> {
        if m.k() != self.k {
            return Err(Error::shape(self.k, m.k()));
        }
        self.values
            .slice_mut(s![y, x, ..])
            .iter_mut()
            .zip(m.values().iter())
            .for_each(|(d, v)| *d = *v);
        Ok(())
    }

    /// Sum of absolute differences over every entry.
    pub fn l1_distance(&self, other: &CoocTensor) -> Result<f64> {
        if self.values.dim() != other.values.dim() {
            return Err(Error::shape(format!("{:?}", self.values.dim()), format!("{:?}", other.values.dim())));
        }
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .sum())
    }

    /// Checks non-negativity, unit sum (`tol`) and symmetry (`tol`) per position.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let (h, w) = self.dim();
        for y in 0..h {
            for x in 0..w {
                let m = self.matrix_view(y, x);
                if m.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::invalid(format!("negative or non-finite entry at ({y}, {x})")));
                }
                let sum = m.sum();
                if (sum - 1.0).abs() > tol {
                    return Err(Error::invalid(format!("position ({y}, {x}) sums to {sum}")));
                }
                for a in 0..self.k {
                    for b in 0..a {
                        if (m[[a, b]] - m[[b, a]]).abs() > tol {
                            return Err(Error::invalid(format!("position ({y}, {x}) is not symmetric")));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Normalises pair sums into row-stacked matrices. `strict` turns a
/// normaliser below [`Z_FLOOR`] into an error; otherwise it is floored.
pub(crate) fn normalize_pair_sums(sums: &Array3<f64>, k: usize, strict: bool) -> Result<(Array3<f64>, Array2<f64>)> {
    let (_, h, w) = sums.dim();
    let pair_list = pairs(k);
    let mut vol = Array3::zeros((h, w, k * k));
    let mut zs = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut z = 0.0;
            for (q, &(a, b)) in pair_list.iter().enumerate() {
                // box sums can cancel to tiny negatives
                let v = sums[[q, y, x]].max(0.0);
                z += if a == b { v } else { 2.0 * v };
            }
            if !(z >= Z_FLOOR) {
                if strict {
                    return Err(Error::DegenerateStatistics { y, x, z });
                }
                z = Z_FLOOR;
            }
            zs[[y, x]] = z;
            for (q, &(a, b)) in pair_list.iter().enumerate() {
                let m = sums[[q, y, x]].max(0.0) / z;
                vol[[y, x, a * k + b]] = m;
                vol[[y, x, b * k + a]] = m;
            }
        }
    }
    Ok((vol, zs))
}

fn volume_values(image: ArrayView3<f64>, palette: &Palette, params: &CoocParams, strict: bool) -> Result<Array3<f64>> {
    crate::imageio::check_rgb(image)?;
    params.validate()?;
    let (h, w, _) = image.dim();
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("image must be at least 2x2, got {h}x{w}")));
    }
    let maps = palette.assignment_maps(image);
    let sums = pair_sums(&maps, params);
    Ok(normalize_pair_sums(&sums, palette.k(), strict)?.0)
}

/// Per-pixel co-occurrence volume. Patches are clamped to the image at the
/// borders, so border positions describe smaller patches.
pub fn cooc_volume(image: ArrayView3<f64>, palette: &Palette, params: &CoocParams) -> Result<CoocVolume> {
    Ok(CoocVolume {
        values: volume_values(image, palette, params, true)?,
        k: palette.k(),
    })
}

/// Block-averages a volume over `s x s` cells.
pub fn downsample_volume(volume: &CoocVolume, s: usize) -> Result<CoocTensor> {
    let (h, w) = volume.dim();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!("volume {h}x{w} is not divisible by s = {s}")));
    }
    Ok(CoocTensor {
        values: block_average(&volume.values, s),
        k: volume.k,
        s,
    })
}

pub(crate) fn block_average(values: &Array3<f64>, s: usize) -> Array3<f64> {
    let (h, w, c) = values.dim();
    let (th, tw) = (h / s, w / s);
    let mut out = Array3::zeros((th, tw, c));
    let norm = 1.0 / (s * s) as f64;
    for ty in 0..th {
        for tx in 0..tw {
            let block = values.slice(s![ty * s..(ty + 1) * s, tx * s..(tx + 1) * s, ..]);
            for ch in 0..c {
                out[[ty, tx, ch]] = block.slice(s![.., .., ch]).sum() * norm;
            }
        }
    }
    out
}

/// `downsample_volume(cooc_volume(image))`.
pub fn cooc_tensor(image: ArrayView3<f64>, palette: &Palette, params: &CoocParams, s: usize) -> Result<CoocTensor> {
    downsample_volume(&cooc_volume(image, palette, params)?, s)
}

/// Like [`cooc_tensor`] but floors degenerate normalisers instead of
/// failing. Used on generated images, whose colours may stray far from the
/// palette early in training.
pub fn cooc_tensor_unchecked(image: ArrayView3<f64>, palette: &Palette, params: &CoocParams, s: usize) -> Result<CoocTensor> {
    let (h, w, _) = image.dim();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!("image {h}x{w} is not divisible by s = {s}")));
    }
    let values = volume_values(image, palette, params, false)?;
    Ok(CoocTensor {
        values: block_average(&values, s),
        k: palette.k(),
        s,
    })
}
