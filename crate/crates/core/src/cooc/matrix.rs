use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::{Palette, Z_FLOOR};
use crate::error::{Error, Result};

/// Spatial parameters of the co-occurrence accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoocParams {
    /// Side of the square patch a per-pixel matrix is accumulated over.
    pub patch_size: usize,
    /// Side of the square window of partners `q` considered around each `p`.
    pub window_size: usize,
    /// Variance of the Gaussian distance weight, in squared pixels.
    pub sigma_sq: f64,
}

impl Default for CoocParams {
    fn default() -> Self {
        Self {
            patch_size: 65,
            window_size: 51,
            sigma_sq: 51.0,
        }
    }
}

impl CoocParams {
    pub fn new(patch_size: usize, window_size: usize, sigma_sq: f64) -> Result<Self> {
        let p = Self {
            patch_size,
            window_size,
            sigma_sq,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::invalid(format!("patch_size must be odd, got {}", self.patch_size)));
        }
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::invalid(format!("window_size must be odd, got {}", self.window_size)));
        }
        if !(self.sigma_sq > 0.0 && self.sigma_sq.is_finite()) {
            return Err(Error::invalid(format!("sigma_sq must be > 0, got {}", self.sigma_sq)));
        }
        Ok(())
    }

    pub fn patch_radius(&self) -> usize {
        self.patch_size / 2
    }

    pub fn window_radius(&self) -> usize {
        self.window_size / 2
    }

    #[inline]
    pub fn distance_weight(&self, dy: isize, dx: isize) -> f64 {
        (-((dy * dy + dx * dx) as f64) / (2.0 * self.sigma_sq)).exp()
    }
}

/// A `k x k` joint probability of palette clusters co-occurring.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocMatrix {
    values: Array2<f64>,
}

impl CoocMatrix {
    /// Wraps `values`, checking squareness, non-negativity and unit sum.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c || r == 0 {
            return Err(Error::shape("square k x k", format!("{r}x{c}")));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("co-occurrence entries must be finite and >= 0"));
        }
        let sum = values.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("co-occurrence matrix sums to {sum}, not 1")));
        }
        Ok(Self { values })
    }

    pub(crate) fn from_raw(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn k(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Row-stacked entries (`a * k + b`).
    pub fn row_stacked(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    pub fn from_row_stacked(k: usize, data: &[f64]) -> Result<Self> {
        if data.len() != k * k {
            return Err(Error::shape(k * k, data.len()));
        }
        Self::new(Array2::from_shape_vec((k, k), data.to_vec()).unwrap())
    }

    pub fn max_asymmetry(&self) -> f64 {
        let k = self.k();
        let mut m = 0.0f64;
        for a in 0..k {
            for b in 0..k {
                m = m.max((self.values[[a, b]] - self.values[[b, a]]).abs());
            }
        }
        m
    }

    pub fn l1_distance(&self, other: &CoocMatrix) -> f64 {
        (&self.values - &other.values).mapv(f64::abs).sum()
    }
}

/// Co-occurrence matrix of a whole patch: all ordered pixel pairs inside
/// the patch whose offset lies within the window, weighted by a Gaussian of
/// their distance and by both soft assignments, normalised to sum to 1.
pub fn cooc_matrix(patch: ArrayView3<f64>, palette: &Palette, params: &CoocParams) -> Result<CoocMatrix> {
    crate::imageio::check_rgb(patch)?;
    params.validate()?;
    let (h, w, _) = patch.dim();
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("patch must be at least 2x2, got {h}x{w}")));
    }
    let k = palette.k();
    let maps = palette.assignment_maps(patch);
    let r = params.window_radius() as isize;
    let (hi, wi) = (h as isize, w as isize);
    let mut m = Array2::<f64>::zeros((k, k));
    for dy in -r..=r {
        for dx in -r..=r {
            let g = params.distance_weight(dy, dx);
            let y0 = 0.max(-dy);
            let y1 = hi.min(hi - dy);
            let x0 = 0.max(-dx);
            let x1 = wi.min(wi - dx);
            if y0 >= y1 || x0 >= x1 {
                continue;
            }
            for a in 0..k {
                for b in a..k {
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += maps[[a, y as usize, x as usize]]
                                * maps[[b, (y + dy) as usize, (x + dx) as usize]];
                        }
                    }
                    m[[a, b]] += g * acc;
                }
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            m[[a, b]] = m[[b, a]];
        }
    }
    let z = m.sum();
    if !(z >= Z_FLOOR) {
        return Err(Error::DegenerateStatistics {
            y: h / 2,
            x: w / 2,
            z,
        });
    }
    m /= z;
    Ok(CoocMatrix::from_raw(m))
}
