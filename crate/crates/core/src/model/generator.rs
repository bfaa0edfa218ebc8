use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{concat_channels, Activation, BatchNorm2d, BnCache, Conv2d, ConvGeometry, Grads, Parameters};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_channels: usize,
    /// `k²` condition channels.
    pub cond_channels: usize,
    /// Output channels per layer; the last must be 3.
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            noise_channels: 32,
            cond_channels: 4,
            widths: vec![256, 128, 64, 32, 3],
            kernel: 5,
        }
    }
}

impl GeneratorConfig {
    /// Spatial scale from condition cells to pixels.
    pub fn upsampling(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.last() != Some(&3) {
            return Err(Error::invalid("generator widths must end with 3 output channels"));
        }
        if self.widths.contains(&0) || self.noise_channels == 0 || self.cond_channels == 0 {
            return Err(Error::invalid("generator channel counts must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("generator kernel size must be odd"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
}

/// Everything the backward pass needs from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorTrace {
    inputs: Vec<Array4<f64>>,
    pre: Vec<Array4<f64>>,
    bn: Vec<BnCache>,
    pub output: Array4<f64>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, "generator-init");
        let geometry = ConvGeometry::new(config.kernel, 1, config.kernel / 2, 2);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c_in = config.noise_channels + config.cond_channels;
        let last = config.widths.len() - 1;
        for (l, &c_out) in config.widths.iter().enumerate() {
            let gain = if l == last { 1.0 } else { 2f64.sqrt() };
            convs.push(Conv2d::new(c_in, c_out, geometry, gain, &mut rng));
            if l != last {
                norms.push(BatchNorm2d::new(c_out));
            }
            c_in = c_out;
        }
        Ok(Self { config, convs, norms })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.convs.len() {
            Activation::Sigmoid
        } else {
            Activation::Relu
        }
    }

    fn input(&self, z: &Array4<f64>, c: &Array4<f64>) -> Result<Array4<f64>> {
        let (zn, zc, zh, zw) = z.dim();
        let (cn, cc, ch, cw) = c.dim();
        if zc != self.config.noise_channels {
            return Err(Error::shape(format!("{} noise channels", self.config.noise_channels), zc));
        }
        if cc != self.config.cond_channels {
            return Err(Error::shape(format!("{} condition channels", self.config.cond_channels), cc));
        }
        if (zn, zh, zw) != (cn, ch, cw) {
            return Err(Error::shape(
                format!("noise batch/spatial dims ({cn}, {ch}, {cw})"),
                format!("({zn}, {zh}, {zw})"),
            ));
        }
        concat_channels(z, c)
    }

    /// Inference with running batch-norm statistics. Intermediate
    /// activations are dropped as soon as possible.
    pub fn generate(&self, z: &Array4<f64>, c: &Array4<f64>) -> Result<Array4<f64>> {
        let mut h = self.input(z, c)?;
        for (l, conv) in self.convs.iter().enumerate() {
            let a = conv.forward(&h)?;
            h = match self.norms.get(l) {
                Some(bn) => bn.forward_eval(a),
                None => a,
            };
            let act = self.activation(l);
            h.mapv_inplace(|v| act.value(v));
        }
        Ok(h)
    }

    /// Training-mode pass with batch statistics. Running statistics are not
    /// touched; call [`Generator::update_running_stats`] for that.
    pub fn forward_train(&self, z: &Array4<f64>, c: &Array4<f64>) -> Result<GeneratorTrace> {
        let mut h = self.input(z, c)?;
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut bn = Vec::new();
        for (l, conv) in self.convs.iter().enumerate() {
            let mut a = conv.forward(&h)?;
            if let Some(norm) = self.norms.get(l) {
                let (y, cache) = norm.forward_train(&a);
                bn.push(cache);
                a = y;
            }
            let next = self.activation(l).forward(&a);
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(a);
        }
        Ok(GeneratorTrace {
            inputs,
            pre,
            bn,
            output: h,
        })
    }

    pub fn update_running_stats(&mut self, trace: &GeneratorTrace) {
        for (norm, cache) in self.norms.iter_mut().zip(&trace.bn) {
            norm.update_running(cache);
        }
    }

    /// Parameter gradients for an upstream gradient on the output.
    pub fn backward(&self, trace: &GeneratorTrace, d_output: &Array4<f64>) -> Result<Grads> {
        if d_output.dim() != trace.output.dim() {
            return Err(Error::shape(format!("{:?}", trace.output.dim()), format!("{:?}", d_output.dim())));
        }
        let layers = self.convs.len();
        let mut per_layer: Vec<Grads> = vec![Vec::new(); layers];
        let mut dh = d_output.clone();
        for l in (0..layers).rev() {
            let da = self.activation(l).backward(&trace.pre[l], &dh);
            let mut extra = Vec::new();
            let du = match self.norms.get(l) {
                Some(norm) => {
                    let (dx, dgamma, dbeta) = norm.backward(&trace.bn[l], &da);
                    extra.push(dgamma.to_vec());
                    extra.push(dbeta.to_vec());
                    dx
                }
                None => da,
            };
            let input = &trace.inputs[l];
            let (dw, db) = self.convs[l].weight_grad(input, &du)?;
            if l > 0 {
                let (_, _, h, w) = input.dim();
                dh = self.convs[l].input_grad(&du, (h, w))?;
            }
            let mut g = vec![dw.into_raw_vec_and_offset().0, db.to_vec()];
            g.extend(extra);
            per_layer[l] = g;
        }
        Ok(per_layer.into_iter().flatten().collect())
    }

    /// Batch-norm running means and variances.
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for n in &self.norms {
            out.push(slice(&n.running_mean));
            out.push(slice(&n.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for n in &mut self.norms {
            out.push(n.running_mean.as_slice_mut().expect("contiguous"));
            out.push(n.running_var.as_slice_mut().expect("contiguous"));
        }
        out
    }
}

fn slice(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

impl Parameters for Generator {
    fn parameters(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (l, conv) in self.convs.iter().enumerate() {
            out.push(conv.weight.as_slice().expect("standard layout"));
            out.push(slice(&conv.bias));
            if let Some(n) = self.norms.get(l) {
                out.push(slice(&n.gamma));
                out.push(slice(&n.beta));
            }
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for conv in self.convs.iter_mut() {
            out.push(conv.weight.as_slice_mut().expect("standard layout"));
            out.push(conv.bias.as_slice_mut().expect("contiguous"));
            if let Some(n) = norms.next() {
                out.push(n.gamma.as_slice_mut().expect("contiguous"));
                out.push(n.beta.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::standard_normal;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            noise_channels: 2,
            cond_channels: 4,
            widths: vec![5, 4, 3],
            kernel: 3,
        }
    }

    fn inputs(n: usize, h: usize, w: usize, seed: u64) -> (Array4<f64>, Array4<f64>) {
        let mut rng = crate::seed::rng(seed, "gen-test");
        (standard_normal((n, 2, h, w), &mut rng), standard_normal((n, 4, h, w), &mut rng))
    }

    #[test]
    fn full_scale_shapes() {
        let g = Generator::new(GeneratorConfig::default(), 0).unwrap();
        let mut rng = crate::seed::rng(1, "t");
        let out = g
            .generate(&standard_normal((1, 32, 2, 1), &mut rng), &standard_normal((1, 4, 2, 1), &mut rng))
            .unwrap();
        assert_eq!(out.dim(), (1, 3, 64, 32));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let g = Generator::new(small(), 0).unwrap();
        let (z, c) = inputs(1, 2, 2, 0);
        let (_, c_other) = inputs(1, 2, 3, 0);
        assert!(matches!(g.generate(&z, &c_other), Err(Error::ShapeMismatch { .. })));
        assert!(g.generate(&c, &c).is_err());
    }

    #[test]
    fn eval_is_deterministic_and_bounded() {
        let g = Generator::new(small(), 3).unwrap();
        let (z, c) = inputs(2, 2, 3, 1);
        let a = g.generate(&z, &c).unwrap();
        assert_eq!(a, g.generate(&z, &c).unwrap());
        assert_eq!(a.dim(), (2, 3, 16, 24));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut g = Generator::new(small(), 7).unwrap();
        let (z, c) = inputs(2, 2, 2, 2);
        let weights = {
            let mut rng = crate::seed::rng(9, "w");
            standard_normal((2, 3, 16, 16), &mut rng)
        };
        let trace = g.forward_train(&z, &c).unwrap();
        let grads = g.backward(&trace, &weights).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        let mut bad = 0;
        for p in 0..grads.len() {
            let len = grads[p].len();
            for i in [0, len / 2, len - 1] {
                let orig = g.parameters()[p][i];
                g.parameters_mut()[p][i] = orig + h;
                let lp = (&g.forward_train(&z, &c).unwrap().output * &weights).sum();
                g.parameters_mut()[p][i] = orig - h;
                let lm = (&g.forward_train(&z, &c).unwrap().output * &weights).sum();
                g.parameters_mut()[p][i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[p][i];
                checked += 1;
                if (fd - an).abs() > 1e-6 + 1e-4 * fd.abs().max(an.abs()) {
                    bad += 1;
                    eprintln!("param {p}[{i}]: fd {fd} analytic {an}");
                }
            }
        }
        assert!(checked > 20);
        assert_eq!(bad, 0);
    }

    #[test]
    fn running_stats_only_change_on_request() {
        let mut g = Generator::new(small(), 0).unwrap();
        let (z, c) = inputs(3, 2, 2, 0);
        let before: Vec<Vec<f64>> = g.buffers().iter().map(|b| b.to_vec()).collect();
        let trace = g.forward_train(&z, &c).unwrap();
        let unchanged: Vec<Vec<f64>> = g.buffers().iter().map(|b| b.to_vec()).collect();
        assert_eq!(before, unchanged);
        g.update_running_stats(&trace);
        let after: Vec<Vec<f64>> = g.buffers().iter().map(|b| b.to_vec()).collect();
        assert_ne!(before, after);
    }
}
