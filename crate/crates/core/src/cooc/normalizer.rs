use log::warn;
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use super::CoocTensor;
use crate::error::{Error, Result};

/// Floor applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel affine standardisation of co-occurrence tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::invalid("normalizer mean/std length mismatch"));
        }
        if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("normalizer std must be positive"));
        }
        Ok(Self { mean, std })
    }

    /// Fits channel means and (population) standard deviations over every
    /// spatial position of every tensor.
    pub fn fit<'a>(tensors: impl IntoIterator<Item = &'a CoocTensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut tensors_seen = Vec::new();
        for t in tensors {
            let c = t.values().dim().2;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sum_sq = vec![0.0; c];
            } else if c != sum.len() {
                return Err(Error::shape(sum.len(), c));
            }
            for lane in t.values().lanes(Axis(2)) {
                for (i, v) in lane.iter().enumerate() {
                    sum[i] += v;
                }
                count += 1;
            }
            tensors_seen.push(t);
        }
        if count == 0 {
            return Err(Error::invalid("cannot fit a normalizer on an empty collection"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        // second pass for numerically stable variance
        for t in tensors_seen {
            for lane in t.values().lanes(Axis(2)) {
                for (i, v) in lane.iter().enumerate() {
                    sum_sq[i] += (v - mean[i]).powi(2);
                }
            }
        }
        let std: Vec<f64> = sum_sq
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let sd = (s / count as f64).sqrt();
                if sd < STD_FLOOR {
                    warn!("channel {i} has near-zero variance; std floored to {STD_FLOOR}");
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, c: usize) -> Result<()> {
        if c != self.channels() {
            return Err(Error::shape(format!("{} channels", self.channels()), c));
        }
        Ok(())
    }

    pub fn normalize(&self, tensor: &CoocTensor) -> Result<Array3<f64>> {
        self.normalize_values(tensor.values())
    }

    pub fn normalize_values(&self, values: &Array3<f64>) -> Result<Array3<f64>> {
        self.check(values.dim().2)?;
        let mut out = values.clone();
        for mut lane in out.lanes_mut(Axis(2)) {
            for (i, v) in lane.iter_mut().enumerate() {
                *v = (*v - self.mean[i]) / self.std[i];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, values: &Array3<f64>, s: usize) -> Result<CoocTensor> {
        self.check(values.dim().2)?;
        let mut out = values.clone();
        for mut lane in out.lanes_mut(Axis(2)) {
            for (i, v) in lane.iter_mut().enumerate() {
                *v = *v * self.std[i] + self.mean[i];
            }
        }
        CoocTensor::from_values(out, s)
    }
}
