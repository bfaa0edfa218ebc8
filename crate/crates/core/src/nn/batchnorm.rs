use ndarray::{Array1, Array4, Axis};

/// Per-channel batch normalisation over `(N, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
    count: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalises with batch statistics. Running statistics are left alone;
    /// see [`BatchNorm2d::update_running`].
    pub fn forward_train(&self, x: &Array4<f64>) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        let count = n * h * w;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let m = plane.sum() / count as f64;
            mean[ch] = m;
            var[ch] = plane.fold(0.0, |acc, v| acc + (v - m) * (v - m)) / count as f64;
        }
        let inv_std = var.mapv(|v: f64| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        let mut y = x.clone();
        for ch in 0..c {
            let (m, is, g, b) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
            xhat.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - m) * is);
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - m) * is * g + b);
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mean,
                var,
                count,
            },
        )
    }

    pub fn update_running(&mut self, cache: &BnCache) {
        let unbias = if cache.count > 1 {
            cache.count as f64 / (cache.count - 1) as f64
        } else {
            1.0
        };
        let mo = self.momentum;
        for ch in 0..self.channels() {
            self.running_mean[ch] = (1.0 - mo) * self.running_mean[ch] + mo * cache.mean[ch];
            self.running_var[ch] = (1.0 - mo) * self.running_var[ch] + mo * cache.var[ch] * unbias;
        }
    }

    pub fn forward_eval(&self, mut x: Array4<f64>) -> Array4<f64> {
        for ch in 0..self.channels() {
            let is = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let (m, g, b) = (self.running_mean[ch], self.gamma[ch], self.beta[ch]);
            x.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - m) * is * g + b);
        }
        x
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, cache: &BnCache, dy: &Array4<f64>) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
        let c = self.channels();
        let m = cache.count as f64;
        let mut dx = dy.clone();
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy = dyc.sum();
            let sum_dy_xh = (&dyc * &xh).sum();
            dgamma[ch] = sum_dy_xh;
            dbeta[ch] = sum_dy;
            let k = self.gamma[ch] * cache.inv_std[ch] / m;
            let mut dxc = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut dxc)
                .and(&xh)
                .for_each(|d, &xv| *d = k * (m * *d - sum_dy - xv * sum_dy_xh));
        }
        (dx, dgamma, dbeta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = crate::seed::rng(seed, "bn-test");
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.5..2.0))
    }

    #[test]
    fn train_output_is_standardised() {
        let bn = BatchNorm2d::new(3);
        let (y, _) = bn.forward_train(&random((4, 3, 5, 5), 1));
        for ch in 0..3 {
            let p = y.index_axis(Axis(1), ch);
            let mean = p.mean().unwrap();
            let var = p.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new(2);
        bn.gamma = ndarray::arr1(&[1.3, -0.7]);
        bn.beta = ndarray::arr1(&[0.2, 0.1]);
        let x = random((3, 2, 3, 2), 2);
        let weights = random((3, 2, 3, 2), 3);
        let loss = |x: &Array4<f64>| (&bn.forward_train(x).0 * &weights).sum();
        let (_, cache) = bn.forward_train(&x);
        let (dx, dgamma, _) = bn.backward(&cache, &weights);
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 1, 2, 1), (2, 0, 1, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "{fd} vs {}", dx[idx]);
        }
        let mut bp = bn.clone();
        bp.gamma[1] += h;
        let mut bm = bn.clone();
        bm.gamma[1] -= h;
        let fd = ((&bp.forward_train(&x).0 * &weights).sum() - (&bm.forward_train(&x).0 * &weights).sum()) / (2.0 * h);
        assert!((fd - dgamma[1]).abs() < 1e-6);
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut bn = BatchNorm2d::new(1);
        let x = Array4::from_shape_fn((2, 1, 1, 2), |(n, _, _, w)| (n * 2 + w) as f64);
        let (_, cache) = bn.forward_train(&x);
        bn.update_running(&cache);
        assert!((bn.running_mean[0] - 0.15).abs() < 1e-12);
        // unbiased variance of 0,1,2,3 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
