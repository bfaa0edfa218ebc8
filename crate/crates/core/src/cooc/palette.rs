use std::collections::HashSet;

use log::warn;
use ndarray::{Array3, ArrayView3};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Lower bound for per-channel cluster spreads, in channel units.
pub const SPREAD_FLOOR: f64 = 1.0 / 255.0;

/// Cluster counts used for the reference experiments.
pub const REFERENCE_CLUSTER_COUNTS: [usize; 3] = [2, 4, 8];

const MAX_ITERS: usize = 50;
const MAX_SAMPLES: usize = 100_000;

/// `k` colour cluster centres with per-channel spreads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    centers: Vec<[f64; 3]>,
    spreads: Vec<[f64; 3]>,
}

impl Palette {
    pub fn new(centers: Vec<[f64; 3]>, spreads: Vec<[f64; 3]>) -> Result<Self> {
        if centers.len() < 2 || centers.len() != spreads.len() {
            return Err(Error::invalid(format!(
                "palette needs >= 2 centers with matching spreads (got {} / {})",
                centers.len(),
                spreads.len()
            )));
        }
        for s in spreads.iter().flatten() {
            if !(s.is_finite() && *s >= SPREAD_FLOOR) {
                return Err(Error::invalid(format!("spread {s} below floor {SPREAD_FLOOR}")));
            }
        }
        for c in centers.iter().flatten() {
            if !c.is_finite() {
                return Err(Error::invalid("non-finite palette center"));
            }
        }
        for i in 0..centers.len() {
            for j in 0..i {
                if centers[i] == centers[j] {
                    return Err(Error::invalid("palette centers must be distinct"));
                }
            }
        }
        Ok(Self { centers, spreads })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[[f64; 3]] {
        &self.centers
    }

    pub fn spreads(&self) -> &[[f64; 3]] {
        &self.spreads
    }

    /// Membership weight of `pixel` in cluster `l`:
    /// `exp(-sum_i (pixel_i - center_i)^2 / spread_i^2)`.
    #[inline]
    pub fn weight(&self, pixel: [f64; 3], l: usize) -> f64 {
        let c = &self.centers[l];
        let s = &self.spreads[l];
        let mut e = 0.0;
        for i in 0..3 {
            let d = pixel[i] - c[i];
            e += d * d / (s[i] * s[i]);
        }
        (-e).exp()
    }

    pub fn soft_assign(&self, pixel: [f64; 3]) -> Vec<f64> {
        (0..self.k()).map(|l| self.weight(pixel, l)).collect()
    }

    /// Index of the centre nearest in spread-normalised distance.
    pub fn nearest(&self, pixel: [f64; 3]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for l in 0..self.k() {
            let c = &self.centers[l];
            let s = &self.spreads[l];
            let d: f64 = (0..3).map(|i| ((pixel[i] - c[i]) / s[i]).powi(2)).sum();
            if d < best.0 {
                best = (d, l);
            }
        }
        best.1
    }

    /// Soft-assignment maps `(k, H, W)` for an `(H, W, 3)` image.
    pub fn assignment_maps(&self, image: ArrayView3<f64>) -> Array3<f64> {
        let (h, w, _) = image.dim();
        let mut maps = Array3::zeros((self.k(), h, w));
        for y in 0..h {
            for x in 0..w {
                let px = [image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]];
                for l in 0..self.k() {
                    maps[[l, y, x]] = self.weight(px, l);
                }
            }
        }
        maps
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Fits a palette with k-means (k-means++ seeding, at most 50 Lloyd
/// iterations) on a uniform subsample of at most 100k pixels.
pub fn fit_palette(image: ArrayView3<f64>, k: usize, seed: u64) -> Result<Palette> {
    crate::imageio::check_rgb(image)?;
    let (h, w, _) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot fit a palette on an empty image"));
    }
    if !(2..=16).contains(&k) {
        return Err(Error::invalid(format!("k must be in 2..=16, got {k}")));
    }
    if !REFERENCE_CLUSTER_COUNTS.contains(&k) {
        warn!("k = {k} is outside the reference values {REFERENCE_CLUSTER_COUNTS:?}");
    }

    let mut rng = seed::rng(seed, "palette");
    let total = h * w;
    let pixel_at = |i: usize| {
        let (y, x) = (i / w, i % w);
        [image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]]
    };
    let points: Vec<[f64; 3]> = if total <= MAX_SAMPLES {
        (0..total).map(pixel_at).collect()
    } else {
        let mut idx = sample(&mut rng, total, MAX_SAMPLES).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(pixel_at).collect()
    };

    let distinct: HashSet<[u64; 3]> = points
        .iter()
        .map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()])
        .collect();
    if distinct.len() < k {
        return Err(Error::DegenerateClusters {
            k,
            distinct: distinct.len(),
        });
    }

    // k-means++ seeding over distinct colours keeps centres distinct.
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total_d: f64 = d2.iter().sum();
        let next = if total_d > 0.0 {
            let mut target = rng.random::<f64>() * total_d;
            let mut pick = d2.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if d2[pick] == 0.0 {
                // Rounding landed on an existing centre; take the farthest point.
                argmax(&d2)
            } else {
                pick
            }
        } else {
            argmax(&d2)
        };
        let c = points[next];
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }

    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let l = nearest_center(&centers, p);
            if labels[i] != l {
                labels[i] = l;
                changed = true;
            }
        }
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for i in 0..3 {
                sums[l][i] += p[i];
            }
        }
        for l in 0..k {
            if counts[l] == 0 {
                // Re-seed an empty cluster at the worst-fitted point.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centers[labels[a]]);
                        let db = sq_dist(&points[b], &centers[labels[b]]);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                centers[l] = points[far];
                labels[far] = l;
                changed = true;
            } else {
                for i in 0..3 {
                    centers[l][i] = sums[l][i] / counts[l] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        labels[i] = nearest_center(&centers, p);
    }

    // Spreads from hard membership, floored.
    let mut spreads = vec![[0.0f64; 3]; k];
    let mut counts = vec![0usize; k];
    let mut means = vec![[0.0f64; 3]; k];
    for (p, &l) in points.iter().zip(&labels) {
        counts[l] += 1;
        for i in 0..3 {
            means[l][i] += p[i];
        }
    }
    for l in 0..k {
        for i in 0..3 {
            means[l][i] /= counts[l].max(1) as f64;
        }
    }
    for (p, &l) in points.iter().zip(&labels) {
        for i in 0..3 {
            spreads[l][i] += (p[i] - means[l][i]).powi(2);
        }
    }
    for l in 0..k {
        for i in 0..3 {
            spreads[l][i] = (spreads[l][i] / counts[l].max(1) as f64).sqrt().max(SPREAD_FLOOR);
        }
    }

    // Canonical order: by luminance-ish sum, then channel-wise.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let sa: f64 = centers[a].iter().sum();
        let sb: f64 = centers[b].iter().sum();
        sa.total_cmp(&sb)
            .then(centers[a][0].total_cmp(&centers[b][0]))
            .then(centers[a][1].total_cmp(&centers[b][1]))
            .then(centers[a][2].total_cmp(&centers[b][2]))
    });
    let centers: Vec<_> = order.iter().map(|&l| centers[l]).collect();
    let spreads: Vec<_> = order.iter().map(|&l| spreads[l]).collect();
    Palette::new(centers, spreads)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn nearest_center(centers: &[[f64; 3]], p: &[f64; 3]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (l, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.0 {
            best = (d, l);
        }
    }
    best.1
}
