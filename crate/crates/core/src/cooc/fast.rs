//! Windowed accumulation of pair sums over soft-assignment maps.
//!
//! For every centre `c` and cluster pair `(a, b)` with `a <= b`:
//!
//! ```text
//! S_ab(c) = sum_{d in window} g(d) * sum_{p : p, p+d in patch(c)} A_a(p) * A_b(p + d)
//! ```
//!
//! where `patch(c)` is the patch around `c` clamped to the image. For a
//! fixed offset `d` the admissible `p` form a rectangle, so each term is a
//! box sum over an integral image of the product map `A_a * shift(A_b, d)`.
//! The cost is `O(window^2 * pairs * H * W)`, independent of the patch size.

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use super::CoocParams;

pub(crate) fn pairs(k: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(k * (k + 1) / 2);
    for a in 0..k {
        for b in a..k {
            v.push((a, b));
        }
    }
    v
}

/// Summed-area table with a zero first row and column.
struct Integral {
    w1: usize,
    data: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize) -> Self {
        Self {
            w1: w + 1,
            data: vec![0.0; (h + 1) * (w + 1)],
        }
    }

    /// Fills from `f(y, x)` over `[y_lo, y_hi) x [x_lo, x_hi)`, zero elsewhere.
    fn fill(&mut self, h: usize, w: usize, rows: (usize, usize), cols: (usize, usize), f: impl Fn(usize, usize) -> f64) {
        let w1 = self.w1;
        for y in 0..h {
            let mut run = 0.0;
            let (prev, cur) = self.data.split_at_mut((y + 1) * w1);
            let prev = &prev[y * w1..];
            let cur = &mut cur[..w1];
            cur[0] = 0.0;
            let active = y >= rows.0 && y < rows.1;
            for x in 0..w {
                if active && x >= cols.0 && x < cols.1 {
                    run += f(y, x);
                }
                cur[x + 1] = prev[x + 1] + run;
            }
        }
    }

    /// Sum over the inclusive rectangle `[y0, y1] x [x0, x1]`.
    #[inline]
    fn box_sum(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
        let w1 = self.w1;
        self.data[(y1 + 1) * w1 + x1 + 1] - self.data[y0 * w1 + x1 + 1] - self.data[(y1 + 1) * w1 + x0]
            + self.data[y0 * w1 + x0]
    }
}

/// Inclusive index range per position, `None` when empty.
fn ranges(n: usize, f: impl Fn(isize) -> (isize, isize)) -> Vec<Option<(usize, usize)>> {
    (0..n as isize)
        .map(|i| {
            let (lo, hi) = f(i);
            (lo <= hi).then_some((lo as usize, hi as usize))
        })
        .collect()
}

fn valid_span(n: usize, d: isize) -> (usize, usize) {
    let n = n as isize;
    (0.max(-d) as usize, n.min(n - d).max(0) as usize)
}

/// Pair sums `(pairs, H, W)` for every centre.
pub(crate) fn pair_sums(maps: &Array3<f64>, params: &CoocParams) -> Array3<f64> {
    let (k, h, w) = maps.dim();
    let pr = params.patch_radius() as isize;
    let r = params.window_radius() as isize;
    let (hi, wi) = (h as isize, w as isize);
    let pair_list = pairs(k);

    let planes: Vec<Array2<f64>> = pair_list
        .par_iter()
        .map(|&(a, b)| {
            let ma = maps.index_axis(ndarray::Axis(0), a);
            let mb = maps.index_axis(ndarray::Axis(0), b);
            let mut out = Array2::<f64>::zeros((h, w));
            let mut integral = Integral::new(h, w);
            for dy in -r..=r {
                let rows = valid_span(h, dy);
                if rows.0 >= rows.1 {
                    continue;
                }
                // first-pixel rows admissible for centre row cy
                let yr = ranges(h, |cy| {
                    (
                        0.max(cy - pr).max(cy - pr - dy).max(-dy),
                        (hi - 1).min(cy + pr).min(cy + pr - dy).min(hi - 1 - dy),
                    )
                });
                for dx in -r..=r {
                    let cols = valid_span(w, dx);
                    if cols.0 >= cols.1 {
                        continue;
                    }
                    let g = params.distance_weight(dy, dx);
                    integral.fill(h, w, rows, cols, |y, x| {
                        ma[[y, x]] * mb[[(y as isize + dy) as usize, (x as isize + dx) as usize]]
                    });
                    let xr = ranges(w, |cx| {
                        (
                            0.max(cx - pr).max(cx - pr - dx).max(-dx),
                            (wi - 1).min(cx + pr).min(cx + pr - dx).min(wi - 1 - dx),
                        )
                    });
                    for (cy, yrange) in yr.iter().enumerate() {
                        let Some((y0, y1)) = *yrange else { continue };
                        let mut row = out.row_mut(cy);
                        for (cx, xrange) in xr.iter().enumerate() {
                            if let Some((x0, x1)) = *xrange {
                                row[cx] += g * integral.box_sum(y0, y1, x0, x1);
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();

    let mut s = Array3::zeros((pair_list.len(), h, w));
    for (q, plane) in planes.into_iter().enumerate() {
        s.index_axis_mut(ndarray::Axis(0), q).assign(&plane);
    }
    s
}

/// Adjoint of [`pair_sums`] with respect to the assignment maps: given
/// `upstream = dL/dS` of shape `(pairs, H, W)`, returns `dL/dA` `(k, H, W)`.
pub(crate) fn pair_sums_adjoint(maps: &Array3<f64>, upstream: &Array3<f64>, params: &CoocParams) -> Array3<f64> {
    let (k, h, w) = maps.dim();
    let pr = params.patch_radius() as isize;
    let r = params.window_radius() as isize;
    let (hi, wi) = (h as isize, w as isize);
    let pair_list = pairs(k);

    let parts: Vec<(Array2<f64>, Array2<f64>)> = pair_list
        .par_iter()
        .enumerate()
        .map(|(q, &(a, b))| {
            let ma = maps.index_axis(ndarray::Axis(0), a);
            let mb = maps.index_axis(ndarray::Axis(0), b);
            let gamma = upstream.index_axis(ndarray::Axis(0), q);
            let mut integral = Integral::new(h, w);
            integral.fill(h, w, (0, h), (0, w), |y, x| gamma[[y, x]]);
            let mut da = Array2::<f64>::zeros((h, w));
            let mut db = Array2::<f64>::zeros((h, w));
            for dy in -r..=r {
                let rows = valid_span(h, dy);
                if rows.0 >= rows.1 {
                    continue;
                }
                // centre rows whose patch holds both p and p + d
                let cyr = ranges(h, |py| {
                    (
                        0.max(py - pr).max(py + dy - pr),
                        (hi - 1).min(py + pr).min(py + dy + pr),
                    )
                });
                for dx in -r..=r {
                    let cols = valid_span(w, dx);
                    if cols.0 >= cols.1 {
                        continue;
                    }
                    let g = params.distance_weight(dy, dx);
                    let cxr = ranges(w, |px| {
                        (
                            0.max(px - pr).max(px + dx - pr),
                            (wi - 1).min(px + pr).min(px + dx + pr),
                        )
                    });
                    for py in rows.0..rows.1 {
                        let Some((y0, y1)) = cyr[py] else { continue };
                        let qy = (py as isize + dy) as usize;
                        for px in cols.0..cols.1 {
                            let Some((x0, x1)) = cxr[px] else { continue };
                            let u = g * integral.box_sum(y0, y1, x0, x1);
                            let qx = (px as isize + dx) as usize;
                            da[[py, px]] += u * mb[[qy, qx]];
                            db[[qy, qx]] += u * ma[[py, px]];
                        }
                    }
                }
            }
            (da, db)
        })
        .collect();

    let mut out = Array3::zeros((k, h, w));
    for ((a, b), (da, db)) in pair_list.iter().zip(parts) {
        let mut ta = out.index_axis_mut(ndarray::Axis(0), *a);
        ta += &da;
        let mut tb = out.index_axis_mut(ndarray::Axis(0), *b);
        tb += &db;
    }
    out
}
