use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convolution geometry. `upsample` applies nearest-neighbour upsampling to
/// the input before the convolution without materialising it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub upsample: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize, upsample: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            upsample,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hu, wu) = (h * self.upsample + 2 * self.pad, w * self.upsample + 2 * self.pad);
        if self.kernel == 0 || self.stride == 0 || self.upsample == 0 {
            return Err(Error::invalid(format!("bad convolution geometry {self:?}")));
        }
        if hu < self.kernel || wu < self.kernel {
            return Err(Error::shape(
                format!("input of at least {0}x{0} after padding", self.kernel),
                format!("{h}x{w}"),
            ));
        }
        Ok(((hu - self.kernel) / self.stride + 1, (wu - self.kernel) / self.stride + 1))
    }
}

/// Upper bound on im2col buffer elements; larger outputs are processed in
/// bands of rows.
#[cfg(not(test))]
const CHUNK_ELEMENTS: usize = 1 << 21;
#[cfg(test)]
const CHUNK_ELEMENTS: usize = 1 << 12;

struct Plan {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    ckk: usize,
    rows: usize,
    g: ConvGeometry,
}

impl Plan {
    fn new(c: usize, h: usize, w: usize, g: ConvGeometry) -> Result<Self> {
        let (ho, wo) = g.output_size(h, w)?;
        let ckk = c * g.kernel * g.kernel;
        let rows = (CHUNK_ELEMENTS / (ckk * wo).max(1)).clamp(1, ho);
        Ok(Self {
            c,
            h,
            w,
            ho,
            wo,
            ckk,
            rows,
            g,
        })
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.ho).step_by(self.rows).map(move |r0| (r0, (r0 + self.rows).min(self.ho)))
    }

    fn buffer(&self) -> Vec<f64> {
        vec![0.0; self.ckk * self.rows * self.wo]
    }

    /// Visits every im2col slot with its source index, `None` for padding.
    #[inline]
    fn for_each_tap(&self, r0: usize, r1: usize, mut f: impl FnMut(usize, Option<usize>)) {
        let g = &self.g;
        let (k, up) = (g.kernel, g.upsample);
        let (hu, wu) = ((self.h * up) as isize, (self.w * up) as isize);
        let cw = (r1 - r0) * self.wo;
        let mut row = 0;
        for c in 0..self.c {
            let base = c * self.h * self.w;
            for ky in 0..k {
                for kx in 0..k {
                    for (i, oy) in (r0..r1).enumerate() {
                        let uy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let dst = row * cw + i * self.wo;
                        if uy < 0 || uy >= hu {
                            for ox in 0..self.wo {
                                f(dst + ox, None);
                            }
                            continue;
                        }
                        let line = base + (uy as usize / up) * self.w;
                        for ox in 0..self.wo {
                            let ux = (ox * g.stride + kx) as isize - g.pad as isize;
                            let src = (ux >= 0 && ux < wu).then(|| line + ux as usize / up);
                            f(dst + ox, src);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
        self.for_each_tap(r0, r1, |d, src| cols[d] = src.map_or(0.0, |s| x[s]));
    }

    fn col2im_add(&self, cols: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
        self.for_each_tap(r0, r1, |d, src| {
            if let Some(s) = src {
                dx[s] += cols[d];
            }
        });
    }
}

fn weight_matrix(weight: &Array4<f64>) -> ArrayView2<'_, f64> {
    let (co, ci, k, _) = weight.dim();
    weight
        .view()
        .into_shape_with_order((co, ci * k * k))
        .expect("weights are kept in standard layout")
}

fn check_weight(x: (usize, usize, usize, usize), weight: &Array4<f64>, g: &ConvGeometry) -> Result<()> {
    let (_, ci, kh, kw) = weight.dim();
    if ci != x.1 || kh != g.kernel || kw != g.kernel {
        return Err(Error::shape(
            format!("{} input channels, {}x{} kernel", ci, g.kernel, g.kernel),
            format!("{} channels, {kh}x{kw} kernel", x.1),
        ));
    }
    if !weight.is_standard_layout() {
        return Err(Error::invalid("convolution weights must be in standard layout"));
    }
    Ok(())
}

pub fn conv2d(x: &Array4<f64>, weight: &Array4<f64>, bias: Option<&Array1<f64>>, g: &ConvGeometry) -> Result<Array4<f64>> {
    check_weight(x.dim(), weight, g)?;
    let x = x.as_standard_layout();
    let (n, c, h, w) = x.dim();
    let co = weight.dim().0;
    let plan = Plan::new(c, h, w, *g)?;
    let wm = weight_matrix(weight);
    let mut out = Array4::zeros((n, co, plan.ho, plan.wo));
    let mut buf = plan.buffer();
    let xs = x.as_slice().expect("standard layout");
    for i in 0..n {
        let xi = &xs[i * c * h * w..(i + 1) * c * h * w];
        let mut oi = out
            .index_axis_mut(Axis(0), i)
            .into_shape_with_order((co, plan.ho * plan.wo))
            .expect("fresh array");
        for (r0, r1) in plan.bands() {
            let cw = (r1 - r0) * plan.wo;
            plan.im2col(xi, r0, r1, &mut buf);
            let cols = ArrayView2::from_shape((plan.ckk, cw), &buf[..plan.ckk * cw]).expect("buffer size");
            let mut dst = oi.slice_mut(s![.., r0 * plan.wo..r1 * plan.wo]);
            general_mat_mul(1.0, &wm, &cols, 0.0, &mut dst);
        }
    }
    if let Some(b) = bias {
        for (ch, &bv) in b.iter().enumerate() {
            out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v + bv);
        }
    }
    Ok(out)
}

/// Gradient with respect to the (pre-upsampling) input of size `in_hw`.
pub fn conv2d_input_grad(dy: &Array4<f64>, weight: &Array4<f64>, g: &ConvGeometry, in_hw: (usize, usize)) -> Result<Array4<f64>> {
    let (co, ci, _, _) = weight.dim();
    let (n, dco, dho, dwo) = dy.dim();
    let plan = Plan::new(ci, in_hw.0, in_hw.1, *g)?;
    if dco != co || dho != plan.ho || dwo != plan.wo {
        return Err(Error::shape(format!("({co}, {}, {})", plan.ho, plan.wo), format!("({dco}, {dho}, {dwo})")));
    }
    let dy = dy.as_standard_layout();
    let wt = weight_matrix(weight).reversed_axes();
    let (h, w) = in_hw;
    let mut dx = Array4::zeros((n, ci, h, w));
    let mut buf = plan.buffer();
    for i in 0..n {
        let dyi = dy.index_axis(Axis(0), i).into_shape_with_order((co, plan.ho * plan.wo)).expect("standard layout");
        let dxi = dx.index_axis_mut(Axis(0), i).into_slice().expect("fresh array");
        for (r0, r1) in plan.bands() {
            let cw = (r1 - r0) * plan.wo;
            {
                let mut cols = ArrayViewMut2::from_shape((plan.ckk, cw), &mut buf[..plan.ckk * cw]).expect("buffer size");
                general_mat_mul(1.0, &wt, &dyi.slice(s![.., r0 * plan.wo..r1 * plan.wo]), 0.0, &mut cols);
            }
            plan.col2im_add(&buf, r0, r1, dxi);
        }
    }
    Ok(dx)
}

/// Returns `(dweight, dbias)`.
pub fn conv2d_weight_grad(x: &Array4<f64>, dy: &Array4<f64>, g: &ConvGeometry) -> Result<(Array4<f64>, Array1<f64>)> {
    let x = x.as_standard_layout();
    let dy = dy.as_standard_layout();
    let (n, c, h, w) = x.dim();
    let (dn, co, dho, dwo) = dy.dim();
    let plan = Plan::new(c, h, w, *g)?;
    if dn != n || dho != plan.ho || dwo != plan.wo {
        return Err(Error::shape(format!("({n}, _, {}, {})", plan.ho, plan.wo), format!("({dn}, _, {dho}, {dwo})")));
    }
    let mut dw = Array2::zeros((co, plan.ckk));
    let mut buf = plan.buffer();
    let xs = x.as_slice().expect("standard layout");
    for i in 0..n {
        let xi = &xs[i * c * h * w..(i + 1) * c * h * w];
        let dyi = dy.index_axis(Axis(0), i).into_shape_with_order((co, plan.ho * plan.wo)).expect("standard layout");
        for (r0, r1) in plan.bands() {
            let cw = (r1 - r0) * plan.wo;
            plan.im2col(xi, r0, r1, &mut buf);
            let cols = ArrayView2::from_shape((plan.ckk, cw), &buf[..plan.ckk * cw]).expect("buffer size");
            general_mat_mul(1.0, &dyi.slice(s![.., r0 * plan.wo..r1 * plan.wo]), &cols.t(), 1.0, &mut dw);
        }
    }
    let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    let dw = dw.into_shape_with_order((co, c, g.kernel, g.kernel)).expect("sizes agree");
    Ok((dw, db))
}

pub fn upsample_nearest(x: &Array4<f64>, factor: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h * factor, w * factor), |(i, ch, y, xx)| x[[i, ch, y / factor, xx / factor]])
}

pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Result<Array4<f64>> {
    let (an, _, ah, aw) = a.dim();
    let (bn, _, bh, bw) = b.dim();
    if (an, ah, aw) != (bn, bh, bw) {
        return Err(Error::shape(format!("({an}, _, {ah}, {aw})"), format!("({bn}, _, {bh}, {bw})")));
    }
    Ok(concatenate(Axis(1), &[a.view(), b.view()])
        .expect("dimensions checked")
        .as_standard_layout()
        .into_owned())
}

/// Splits off the first `c` channels.
pub fn split_channels(x: &Array4<f64>, c: usize) -> (Array4<f64>, Array4<f64>) {
    (
        x.slice(s![.., ..c, .., ..]).to_owned(),
        x.slice(s![.., c.., .., ..]).to_owned(),
    )
}

/// A convolution layer with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub geometry: ConvGeometry,
}

impl Conv2d {
    /// He-style normal initialisation scaled by `gain`.
    pub fn new(in_channels: usize, out_channels: usize, geometry: ConvGeometry, gain: f64, rng: &mut impl Rng) -> Self {
        let k = geometry.kernel;
        let std = gain / ((in_channels * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            weight: Array4::from_shape_simple_fn((out_channels, in_channels, k, k), || normal.sample(rng)),
            bias: Array1::zeros(out_channels),
            geometry,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        conv2d(x, &self.weight, Some(&self.bias), &self.geometry)
    }

    pub fn forward_no_bias(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        conv2d(x, &self.weight, None, &self.geometry)
    }

    pub fn input_grad(&self, dy: &Array4<f64>, in_hw: (usize, usize)) -> Result<Array4<f64>> {
        conv2d_input_grad(dy, &self.weight, &self.geometry, in_hw)
    }

    pub fn weight_grad(&self, x: &Array4<f64>, dy: &Array4<f64>) -> Result<(Array4<f64>, Array1<f64>)> {
        conv2d_weight_grad(x, dy, &self.geometry)
    }
}
