//! Seeded procedural textures, used for demos and tests.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Blobs,
    Cells,
    Stripes,
    /// Blobs whose colour proportion drifts from left to right.
    Graded,
}

impl std::str::FromStr for Pattern {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "cells" => Ok(Self::Cells),
            "stripes" => Ok(Self::Stripes),
            "graded" => Ok(Self::Graded),
            other => Err(crate::Error::invalid(format!("unknown pattern `{other}`"))),
        }
    }
}

pub fn generate(pattern: Pattern, h: usize, w: usize, seed: u64) -> Array3<f64> {
    match pattern {
        Pattern::Blobs => blobs(h, w, seed),
        Pattern::Cells => cells(h, w, seed),
        Pattern::Stripes => stripes(h, w, seed),
        Pattern::Graded => graded(h, w, seed),
    }
}

const WARM: [f64; 3] = [0.85, 0.55, 0.25];
const COOL: [f64; 3] = [0.15, 0.3, 0.55];
const CELL_COLOURS: [[f64; 3]; 4] = [[0.9, 0.2, 0.2], [0.2, 0.75, 0.3], [0.2, 0.3, 0.9], [0.95, 0.9, 0.3]];

/// Sum of random signed Gaussian bumps, roughly in `[-1, 1]`.
fn bump_field(h: usize, w: usize, radius: f64, seed: u64) -> Array3<f64> {
    let mut rng = seed::rng(seed, "bumps");
    let count = ((h * w) as f64 / (radius * radius) * 0.6).ceil() as usize + 2;
    let mut field = Array3::<f64>::zeros((h, w, 1));
    let reach = (3.0 * radius).ceil() as isize;
    let inv = 1.0 / (2.0 * radius * radius);
    for _ in 0..count {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (iy, ix) = (cy as isize, cx as isize);
        for y in (iy - reach).max(0)..(iy + reach + 1).min(h as isize) {
            for x in (ix - reach).max(0)..(ix + reach + 1).min(w as isize) {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                field[[y as usize, x as usize, 0]] += sign * (-d2 * inv).exp();
            }
        }
    }
    field
}

fn add_grain(img: &mut Array3<f64>, amount: f64, seed: u64) {
    let mut rng = seed::rng(seed, "grain");
    let normal = Normal::new(0.0, amount).expect("valid std");
    img.mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0));
}

fn two_tone(field: &Array3<f64>, threshold: impl Fn(usize, usize) -> f64) -> Array3<f64> {
    let (h, w, _) = field.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let t = 1.0 / (1.0 + (-(field[[y, x, 0]] - threshold(y, x)) * 12.0).exp());
        COOL[c] + (WARM[c] - COOL[c]) * t
    })
}

/// Two-colour blobs.
pub fn blobs(h: usize, w: usize, seed: u64) -> Array3<f64> {
    let radius = (h.min(w) as f64 / 8.0).max(1.5);
    let field = bump_field(h, w, radius, seed);
    let mut img = two_tone(&field, |_, _| 0.0);
    add_grain(&mut img, 0.02, seed);
    img
}

/// Blobs where the warm colour becomes more frequent towards the right.
pub fn graded(h: usize, w: usize, seed: u64) -> Array3<f64> {
    let radius = (h.min(w) as f64 / 24.0).max(2.0);
    let field = bump_field(h, w, radius, seed);
    let span = (w.max(2) - 1) as f64;
    let mut img = two_tone(&field, |_, x| 0.9 - 1.8 * x as f64 / span);
    add_grain(&mut img, 0.02, seed);
    img
}

/// Voronoi cells in four flat colours.
pub fn cells(h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = seed::rng(seed, "cells");
    let n = ((h * w) / 48).max(8);
    let sites: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
        .collect();
    let mut img = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let nearest = sites
                .iter()
                .enumerate()
                .map(|(i, (sy, sx))| (i, (sy - y as f64).powi(2) + (sx - x as f64).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let colour = CELL_COLOURS[nearest % CELL_COLOURS.len()];
            for c in 0..3 {
                img[[y, x, c]] = colour[c];
            }
        }
    }
    // every colour shows up at least once
    for (i, colour) in CELL_COLOURS.iter().enumerate() {
        let (sy, sx) = sites[i];
        for c in 0..3 {
            img[[sy as usize, sx as usize, c]] = colour[c];
        }
    }
    img
}

/// Wavy diagonal stripes.
pub fn stripes(h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = seed::rng(seed, "stripes");
    let period = rng.random_range(6.0..12.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let wobble = rng.random_range(1.0..3.0);
    let mut img = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let u = (x as f64 + y as f64 + wobble * (y as f64 / 9.0).sin()) / period * std::f64::consts::TAU + phase;
        let t = 0.5 + 0.5 * u.sin().signum();
        COOL[c] + (WARM[c] - COOL[c]) * t
    });
    add_grain(&mut img, 0.015, seed);
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        for p in [Pattern::Blobs, Pattern::Cells, Pattern::Stripes, Pattern::Graded] {
            let a = generate(p, 40, 56, 9);
            assert_eq!(a, generate(p, 40, 56, 9));
            assert_ne!(a, generate(p, 40, 56, 10));
            assert_eq!(a.dim(), (40, 56, 3));
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn graded_drifts_towards_warm() {
        let img = graded(96, 192, 3);
        let warm_share = |x0: usize, x1: usize| {
            let mut n = 0;
            for y in 0..96 {
                for x in x0..x1 {
                    n += (img[[y, x, 0]] > 0.5) as usize;
                }
            }
            n as f64 / (96 * (x1 - x0)) as f64
        };
        assert!(warm_share(0, 48) + 0.3 < warm_share(144, 192));
    }
}
