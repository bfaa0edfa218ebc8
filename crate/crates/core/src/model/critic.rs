use ndarray::{Array1, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    accumulate, concat_channels, split_channels, upsample_nearest, Activation, Conv2d, ConvGeometry, Grads, Parameters,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub cond_channels: usize,
    /// Output channels per stride-2 layer.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// The condition is concatenated after this many layers.
    pub inject_after: usize,
    pub slope: f64,
    /// Squash the score map with a sigmoid instead of leaving it linear.
    pub sigmoid_output: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            cond_channels: 4,
            widths: vec![64, 128, 256, 512, 1],
            kernel: 5,
            inject_after: 3,
            slope: 0.2,
            sigmoid_output: false,
        }
    }
}

impl CriticConfig {
    pub fn downsampling(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.cond_channels == 0 {
            return Err(Error::invalid("critic channel counts must be positive"));
        }
        if self.inject_after == 0 || self.inject_after >= self.widths.len() {
            return Err(Error::invalid(format!(
                "condition injection layer must be in 1..{}",
                self.widths.len()
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("critic kernel size must be odd"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    config: CriticConfig,
    convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct CriticTrace {
    inputs: Vec<Array4<f64>>,
    pre: Vec<Array4<f64>>,
    pub scores: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct GradientPenalty {
    pub value: f64,
    /// Per-sample input-gradient norms.
    pub norms: Vec<f64>,
    pub input_grad: Array4<f64>,
    pub grads: Grads,
}

impl Critic {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, "critic-init");
        let geometry = ConvGeometry::new(config.kernel, 2, config.kernel / 2, 1);
        let leaky_gain = (2.0 / (1.0 + config.slope * config.slope)).sqrt();
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (l, &c_out) in config.widths.iter().enumerate() {
            if l == config.inject_after {
                c_in += config.cond_channels;
            }
            let gain = if l + 1 == config.widths.len() { 1.0 } else { leaky_gain };
            convs.push(Conv2d::new(c_in, c_out, geometry, gain, &mut rng));
            c_in = c_out;
        }
        Ok(Self { config, convs })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 < self.convs.len() {
            Activation::LeakyRelu(self.config.slope)
        } else if self.config.sigmoid_output {
            Activation::Sigmoid
        } else {
            Activation::Identity
        }
    }

    fn check_inputs(&self, x: &Array4<f64>, c: &Array4<f64>) -> Result<()> {
        let (n, ch, h, w) = x.dim();
        let (cn, cc, chh, cw) = c.dim();
        let s = self.config.downsampling();
        if ch != 3 {
            return Err(Error::shape("3 image channels", ch));
        }
        if cc != self.config.cond_channels {
            return Err(Error::shape(format!("{} condition channels", self.config.cond_channels), cc));
        }
        if cn != n || h != chh * s || w != cw * s {
            return Err(Error::shape(
                format!("batch {n} with image {}x{} for the condition", chh * s, cw * s),
                format!("batch {cn} with image {h}x{w}"),
            ));
        }
        Ok(())
    }

    fn condition_at(&self, c: &Array4<f64>, h: &Array4<f64>) -> Result<Array4<f64>> {
        let (_, _, fh, fw) = h.dim();
        let (_, _, ch, cw) = c.dim();
        if fh % ch != 0 || fw % cw != 0 || fh / ch != fw / cw {
            return Err(Error::shape(format!("features divisible by {ch}x{cw}"), format!("{fh}x{fw}")));
        }
        Ok(upsample_nearest(c, fh / ch))
    }

    pub fn forward(&self, x: &Array4<f64>, c: &Array4<f64>) -> Result<CriticTrace> {
        self.check_inputs(x, c)?;
        let mut h = x.clone();
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        for (l, conv) in self.convs.iter().enumerate() {
            let u = if l == self.config.inject_after {
                let cu = self.condition_at(c, &h)?;
                concat_channels(&h, &cu)?
            } else {
                h
            };
            let a = conv.forward(&u)?;
            h = self.activation(l).forward(&a);
            inputs.push(u);
            pre.push(a);
        }
        let n = h.dim().0;
        let per = (h.len() / n.max(1)) as f64;
        let scores = Array1::from_shape_fn(n, |i| h.index_axis(Axis(0), i).sum() / per);
        Ok(CriticTrace { inputs, pre, scores })
    }

    pub fn score(&self, x: &Array4<f64>, c: &Array4<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x, c)?.scores)
    }

    fn score_map_seed(&self, trace: &CriticTrace, d_scores: &Array1<f64>) -> Array4<f64> {
        let last = trace.pre.last().expect("at least one layer");
        let dim = last.dim();
        let per = (dim.1 * dim.2 * dim.3) as f64;
        Array4::from_shape_fn(dim, |(i, _, _, _)| d_scores[i] / per)
    }

    /// Reverse pass for upstream score gradients `d_scores`, plus optional
    /// extra gradients injected at each layer's pre-activation. Returns the
    /// parameter gradients and the gradient with respect to the image.
    pub fn backward(
        &self,
        trace: &CriticTrace,
        d_scores: &Array1<f64>,
        seeds: &[Option<Array4<f64>>],
    ) -> Result<(Grads, Array4<f64>)> {
        if d_scores.len() != trace.scores.len() {
            return Err(Error::shape(trace.scores.len(), d_scores.len()));
        }
        let layers = self.convs.len();
        let mut per_layer: Vec<Grads> = vec![Vec::new(); layers];
        let mut dh = self.score_map_seed(trace, d_scores);
        for l in (0..layers).rev() {
            let mut da = self.activation(l).backward(&trace.pre[l], &dh);
            if let Some(Some(seed)) = seeds.get(l) {
                da += seed;
            }
            let input = &trace.inputs[l];
            let (dw, db) = self.convs[l].weight_grad(input, &da)?;
            per_layer[l] = vec![dw.into_raw_vec_and_offset().0, db.to_vec()];
            let (_, _, h, w) = input.dim();
            let du = self.convs[l].input_grad(&da, (h, w))?;
            dh = if l == self.config.inject_after {
                split_channels(&du, self.convs[l - 1].out_channels()).0
            } else {
                du
            };
        }
        Ok((per_layer.into_iter().flatten().collect(), dh))
    }

    /// Gradient of each sample's score with respect to its image.
    pub fn input_gradient(&self, x: &Array4<f64>, c: &Array4<f64>) -> Result<Array4<f64>> {
        let trace = self.forward(x, c)?;
        let ones = Array1::ones(trace.scores.len());
        Ok(self.backward(&trace, &ones, &[])?.1)
    }

    /// `λ/N Σ_i (‖∇_x D(x_i)‖ − 1)²` with its gradient with respect to the
    /// critic parameters, obtained by differentiating the input-gradient
    /// computation itself.
    pub fn gradient_penalty(&self, x: &Array4<f64>, c: &Array4<f64>, lambda: f64) -> Result<GradientPenalty> {
        let trace = self.forward(x, c)?;
        let layers = self.convs.len();
        let n = x.dim().0;

        // first pass: input gradient, keeping the per-layer cotangents
        let mut hdot = vec![Array4::zeros((0, 0, 0, 0)); layers];
        let mut adot = vec![Array4::zeros((0, 0, 0, 0)); layers];
        hdot[layers - 1] = self.score_map_seed(&trace, &Array1::ones(n));
        let mut g = Array4::zeros((0, 0, 0, 0));
        for l in (0..layers).rev() {
            adot[l] = self.activation(l).backward(&trace.pre[l], &hdot[l]);
            let (_, _, h, w) = trace.inputs[l].dim();
            let du = self.convs[l].input_grad(&adot[l], (h, w))?;
            if l == 0 {
                g = du;
            } else if l == self.config.inject_after {
                hdot[l - 1] = split_channels(&du, self.convs[l - 1].out_channels()).0;
            } else {
                hdot[l - 1] = du;
            }
        }

        let norms: Vec<f64> = (0..n)
            .map(|i| g.index_axis(Axis(0), i).mapv(|v| v * v).sum().sqrt())
            .collect();
        let value = lambda / n as f64 * norms.iter().map(|m| (m - 1.0).powi(2)).sum::<f64>();
        let mut r = g.clone();
        for (i, &m) in norms.iter().enumerate() {
            let f = if m > 0.0 {
                lambda / n as f64 * 2.0 * (m - 1.0) / m
            } else {
                0.0
            };
            r.index_axis_mut(Axis(0), i).mapv_inplace(|v| v * f);
        }

        // second pass: reverse of the first, from the input side upwards
        let mut per_layer: Vec<Grads> = vec![Vec::new(); layers];
        let mut seeds: Vec<Option<Array4<f64>>> = vec![None; layers];
        for l in 0..layers {
            let conv = &self.convs[l];
            let act = self.activation(l);
            let adj = conv.forward_no_bias(&r)?;
            let (dw, _) = conv.weight_grad(&r, &adot[l])?;
            per_layer[l] = vec![dw.into_raw_vec_and_offset().0, vec![0.0; conv.out_channels()]];
            if !act.is_piecewise_linear() {
                let mut seed = adj.clone();
                Zip::from(&mut seed)
                    .and(&hdot[l])
                    .and(&trace.pre[l])
                    .for_each(|s, &hd, &a| *s *= hd * act.second_derivative(a));
                seeds[l] = Some(seed);
            }
            if l + 1 < layers {
                let v = act.backward(&trace.pre[l], &adj);
                r = if l + 1 == self.config.inject_after {
                    let (vn, _, vh, vw) = v.dim();
                    concat_channels(&v, &Array4::zeros((vn, self.config.cond_channels, vh, vw)))?
                } else {
                    v
                };
            }
        }
        let mut grads: Grads = per_layer.into_iter().flatten().collect();
        if seeds.iter().any(Option::is_some) {
            let (extra, _) = self.backward(&trace, &Array1::zeros(n), &seeds)?;
            accumulate(&mut grads, &extra);
        }
        Ok(GradientPenalty {
            value,
            norms,
            input_grad: g,
            grads,
        })
    }
}

impl Parameters for Critic {
    fn parameters(&self) -> Vec<&[f64]> {
        self.convs
            .iter()
            .flat_map(|c| [c.weight.as_slice().expect("standard layout"), c.bias.as_slice().expect("contiguous")])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.convs
            .iter_mut()
            .flat_map(|c| {
                [
                    c.weight.as_slice_mut().expect("standard layout"),
                    c.bias.as_slice_mut().expect("contiguous"),
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::standard_normal;

    fn small(sigmoid_output: bool) -> CriticConfig {
        CriticConfig {
            cond_channels: 2,
            widths: vec![3, 4, 2],
            kernel: 3,
            inject_after: 2,
            slope: 0.2,
            sigmoid_output,
        }
    }

    fn inputs(n: usize, seed: u64) -> (Array4<f64>, Array4<f64>) {
        let mut rng = crate::seed::rng(seed, "critic-test");
        let x = standard_normal((n, 3, 16, 8), &mut rng).mapv(|v| 0.5 + 0.2 * v);
        (x, standard_normal((n, 2, 2, 1), &mut rng))
    }

    #[test]
    fn full_scale_shapes() {
        let d = Critic::new(CriticConfig::default(), 0).unwrap();
        let mut rng = crate::seed::rng(0, "t");
        let x = standard_normal((1, 3, 64, 32), &mut rng);
        let c = standard_normal((1, 4, 2, 1), &mut rng);
        let trace = d.forward(&x, &c).unwrap();
        assert_eq!(trace.inputs[3].dim(), (1, 256 + 4, 8, 4));
        assert_eq!(trace.pre[4].dim(), (1, 1, 2, 1));
        assert!(trace.scores[0].is_finite());
        assert!(d.score(&x, &standard_normal((1, 4, 2, 2), &mut rng)).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let d = Critic::new(small(true), 1).unwrap();
        let (x, c) = inputs(2, 1);
        let g = d.input_gradient(&x, &c).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 2, 7, 3), (0, 1, 15, 7), (1, 0, 9, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let i = idx.0;
            let fd = (d.score(&xp, &c).unwrap()[i] - d.score(&xm, &c).unwrap()[i]) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-7, "{fd} vs {}", g[idx]);
        }
    }

    fn check_penalty_gradients(sigmoid_output: bool) {
        let mut d = Critic::new(small(sigmoid_output), 2).unwrap();
        let (x, c) = inputs(3, 2);
        let lambda = 1.7;
        let gp = d.gradient_penalty(&x, &c, lambda).unwrap();
        // direct recomputation of the value from the input gradient
        let g = d.input_gradient(&x, &c).unwrap();
        let direct: f64 = (0..3)
            .map(|i| (g.index_axis(Axis(0), i).mapv(|v| v * v).sum().sqrt() - 1.0).powi(2))
            .sum::<f64>()
            * lambda
            / 3.0;
        assert!((gp.value - direct).abs() < 1e-12);
        let h = 1e-6;
        let mut bad = 0;
        let mut checked = 0;
        for p in 0..gp.grads.len() {
            let len = gp.grads[p].len();
            for i in (0..len).step_by((len / 5).max(1)) {
                let orig = d.parameters()[p][i];
                d.parameters_mut()[p][i] = orig + h;
                let vp = d.gradient_penalty(&x, &c, lambda).unwrap().value;
                d.parameters_mut()[p][i] = orig - h;
                let vm = d.gradient_penalty(&x, &c, lambda).unwrap().value;
                d.parameters_mut()[p][i] = orig;
                let fd = (vp - vm) / (2.0 * h);
                let an = gp.grads[p][i];
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
    fn penalty_gradient_linear_output() {
        check_penalty_gradients(false);
    }

    #[test]
    fn penalty_gradient_sigmoid_output() {
        check_penalty_gradients(true);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut d = Critic::new(small(false), 4).unwrap();
        let (x, c) = inputs(2, 4);
        let w = Array1::from_vec(vec![0.7, -1.3]);
        let trace = d.forward(&x, &c).unwrap();
        let (grads, _) = d.backward(&trace, &w, &[]).unwrap();
        let h = 1e-6;
        for p in 0..grads.len() {
            let i = grads[p].len() / 2;
            let orig = d.parameters()[p][i];
            d.parameters_mut()[p][i] = orig + h;
            let lp = (&d.score(&x, &c).unwrap() * &w).sum();
            d.parameters_mut()[p][i] = orig - h;
            let lm = (&d.score(&x, &c).unwrap() * &w).sum();
            d.parameters_mut()[p][i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grads[p][i]).abs() < 1e-7, "param {p}: {fd} vs {}", grads[p][i]);
        }
    }

    #[test]
    fn scores_follow_batch_permutation() {
        let d = Critic::new(small(false), 5).unwrap();
        let (x, c) = inputs(3, 5);
        let scores = d.score(&x, &c).unwrap();
        let order = [2, 0, 1];
        let xp = x.select(Axis(0), &order);
        let cp = c.select(Axis(0), &order);
        let permuted = d.score(&xp, &cp).unwrap();
        for (j, &i) in order.iter().enumerate() {
            assert_eq!(permuted[j], scores[i]);
        }
    }
}
