//! Inference-time generation: sampling, interpolation and morphing, bin
//! editing and large layouts assembled in co-occurrence space.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, RgbaImage};
use ndarray::{Array2, Array3, Array4};

use crate::cooc::{storage, CoocMatrix, CoocTensor};
use crate::error::{Error, Result};
use crate::imageio;
use crate::model::{from_batch, Checkpoint, NoiseTensor};

/// Normalised `(1, k², h, w)` condition batch for `tensor`.
pub fn condition_batch(ckpt: &Checkpoint, tensor: &CoocTensor) -> Result<Array4<f64>> {
    let expected = ckpt.generator.config().cond_channels;
    let (_, _, ch) = tensor.values().dim();
    if ch != expected {
        return Err(Error::shape(format!("{expected} channels (k²)"), ch));
    }
    let normalized = ckpt.stats.normalizer()?.normalize(tensor)?;
    crate::model::to_batch([normalized.view()])
}

/// Generates with an explicit noise tensor, which must match the tensor's
/// spatial size.
pub fn synthesize_with_noise(ckpt: &Checkpoint, tensor: &CoocTensor, noise: &NoiseTensor) -> Result<Array3<f64>> {
    let c = condition_batch(ckpt, tensor)?;
    let (nh, nw, _) = noise.values().dim();
    if (nh, nw) != tensor.dim() {
        return Err(Error::shape(format!("{:?}", tensor.dim()), format!("({nh}, {nw})")));
    }
    let out = ckpt.generator.generate(&noise.to_batch(), &c)?;
    Ok(from_batch(&out, 0))
}

/// An `(s·h) × (s·w)` image for an `h × w` tensor.
pub fn synthesize(ckpt: &Checkpoint, tensor: &CoocTensor, seed: u64) -> Result<Array3<f64>> {
    let (h, w) = tensor.dim();
    let noise = NoiseTensor::sample(h, w, ckpt.generator.config().noise_channels, seed);
    synthesize_with_noise(ckpt, tensor, &noise)
}

fn check_same(a: &CoocTensor, b: &CoocTensor) -> Result<()> {
    if a.values().dim() != b.values().dim() {
        return Err(Error::shape(format!("{:?}", a.values().dim()), format!("{:?}", b.values().dim())));
    }
    Ok(())
}

/// `(1 - t)·a + t·b`. Outside `[0, 1]` negative entries are clamped to zero
/// and every position is renormalised.
pub fn interpolate_tensors(a: &CoocTensor, b: &CoocTensor, t: f64) -> Result<CoocTensor> {
    check_same(a, b)?;
    if !t.is_finite() {
        return Err(Error::invalid("interpolation parameter must be finite"));
    }
    let mut values = a.values() * (1.0 - t) + b.values() * t;
    if !(0.0..=1.0).contains(&t) {
        values.mapv_inplace(|v| v.max(0.0));
        for mut cell in values.rows_mut() {
            let sum = cell.sum();
            if sum <= 0.0 {
                return Err(Error::ZeroMatrix);
            }
            cell /= sum;
        }
    }
    CoocTensor::from_values(values, a.s())
}

#[derive(Debug, Clone)]
pub struct MorphSpec {
    pub start: CoocTensor,
    pub end: CoocTensor,
    pub ts: Vec<f64>,
    pub seed: u64,
}

/// `frames` evenly spaced values from `t0` to `t1` inclusive.
pub fn linear_ramp(frames: usize, t0: f64, t1: f64) -> Vec<f64> {
    match frames {
        0 => Vec::new(),
        1 => vec![t0],
        n => (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// One frame per `t`, all sharing one noise tensor.
pub fn morph_sequence(ckpt: &Checkpoint, spec: &MorphSpec) -> Result<Vec<Array3<f64>>> {
    check_same(&spec.start, &spec.end)?;
    let (h, w) = spec.start.dim();
    let noise = NoiseTensor::sample(h, w, ckpt.generator.config().noise_channels, spec.seed);
    spec.ts
        .iter()
        .map(|&t| synthesize_with_noise(ckpt, &interpolate_tensors(&spec.start, &spec.end, t)?, &noise))
        .collect()
}

/// Writes `prefix_000.png, prefix_001.png, ...` and, with `gif_delay_ms`,
/// an animated `prefix.gif` next to them.
pub fn save_sequence(frames: &[Array3<f64>], dir: &Path, prefix: &str, gif_delay_ms: Option<u32>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let digits = frames.len().saturating_sub(1).to_string().len().max(3);
    let mut paths = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let path = dir.join(format!("{prefix}_{i:0digits$}.png"));
        imageio::save_png(f.view(), &path)?;
        paths.push(path);
    }
    if let Some(delay) = gif_delay_ms {
        let path = dir.join(format!("{prefix}.gif"));
        let file = std::fs::File::create(&path)?;
        let mut enc = GifEncoder::new(file);
        enc.set_repeat(Repeat::Infinite)?;
        for f in frames {
            let rgba: RgbaImage = image::DynamicImage::ImageRgb8(imageio::to_rgb8(f.view())).to_rgba8();
            enc.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(delay, 1)))?;
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Multiplies bins `(a, b)` and `(b, a)` by `factor` and renormalises.
pub fn edit_bin(m: &CoocMatrix, a: usize, b: usize, factor: f64) -> Result<CoocMatrix> {
    let k = m.k();
    if a >= k || b >= k {
        return Err(Error::invalid(format!("bin ({a}, {b}) outside a {k}x{k} matrix")));
    }
    if !(factor.is_finite() && factor >= 0.0) {
        return Err(Error::invalid(format!("factor must be finite and >= 0, got {factor}")));
    }
    let mut v: Array2<f64> = m.values().clone();
    v[[a, b]] *= factor;
    if a != b {
        v[[b, a]] *= factor;
    }
    let sum = v.sum();
    if !(sum > 0.0) {
        return Err(Error::ZeroMatrix);
    }
    v /= sum;
    CoocMatrix::new(v)
}

/// A rectangle of tensor cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Applies [`edit_bin`] to every cell in `region`, or to all cells.
pub fn edit_tensor(t: &CoocTensor, region: Option<CellRect>, a: usize, b: usize, factor: f64) -> Result<CoocTensor> {
    let (h, w) = t.dim();
    let r = region.unwrap_or(CellRect { y: 0, x: 0, h, w });
    if r.h == 0 || r.w == 0 || r.y + r.h > h || r.x + r.w > w {
        return Err(Error::invalid(format!("region {r:?} outside a {h}x{w} tensor")));
    }
    let mut out = t.clone();
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            out.set_matrix(y, x, &edit_bin(&t.matrix_at(y, x), a, b, factor)?)?;
        }
    }
    Ok(out)
}

/// Assignment of a source tensor to a rectangle of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub source: usize,
    pub rect: CellRect,
}

/// A canvas of tensor cells covered by source tensors. Inside a placement,
/// cell `(y, x)` takes the source's cell `(y mod h_s, x mod w_s)`, so a
/// source tiles seamlessly across neighbouring placements.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocLayout {
    sources: Vec<CoocTensor>,
    placements: Vec<Placement>,
    height: usize,
    width: usize,
    owner: Array2<usize>,
}

impl CoocLayout {
    pub fn new(sources: Vec<CoocTensor>, placements: Vec<Placement>, height: usize, width: usize) -> Result<Self> {
        let first = sources.first().ok_or_else(|| Error::invalid("layout needs at least one source"))?;
        if sources.iter().any(|s| s.k() != first.k()) {
            return Err(Error::invalid("layout sources disagree on k"));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("layout must have at least one cell"));
        }
        let mut owner = Array2::from_elem((height, width), usize::MAX);
        for p in &placements {
            let r = p.rect;
            if p.source >= sources.len() {
                return Err(Error::invalid(format!("placement refers to missing source {}", p.source)));
            }
            if r.y + r.h > height || r.x + r.w > width {
                return Err(Error::invalid(format!("placement {r:?} exceeds the {height}x{width} canvas")));
            }
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    if owner[[y, x]] != usize::MAX {
                        return Err(Error::invalid(format!("placements overlap at cell ({y}, {x})")));
                    }
                    owner[[y, x]] = p.source;
                }
            }
        }
        if let Some(((y, x), _)) = owner.indexed_iter().find(|(_, &o)| o == usize::MAX) {
            return Err(Error::invalid(format!("cell ({y}, {x}) is not covered")));
        }
        Ok(Self {
            sources,
            placements,
            height,
            width,
            owner,
        })
    }

    /// One source covering the whole canvas.
    pub fn uniform(source: CoocTensor, height: usize, width: usize) -> Result<Self> {
        let rect = CellRect {
            y: 0,
            x: 0,
            h: height,
            w: width,
        };
        Self::new(vec![source], vec![Placement { source: 0, rect }], height, width)
    }

    /// Builds a layout from a character grid: each character is one cell,
    /// and `sources` maps characters to tensors.
    pub fn from_grid(grid: &[String], sources: &BTreeMap<char, CoocTensor>) -> Result<Self> {
        let height = grid.len();
        let width = grid.first().map_or(0, |r| r.chars().count());
        if grid.iter().any(|r| r.chars().count() != width) {
            return Err(Error::format("layout grid", "rows have different lengths"));
        }
        let symbols: Vec<char> = sources.keys().copied().collect();
        let mut placements = Vec::new();
        for (y, row) in grid.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                let source = symbols
                    .iter()
                    .position(|&c| c == ch)
                    .ok_or_else(|| Error::format("layout grid", format!("symbol `{ch}` has no source")))?;
                placements.push(Placement {
                    source,
                    rect: CellRect { y, x, h: 1, w: 1 },
                });
            }
        }
        Self::new(sources.values().cloned().collect(), placements, height, width)
    }

    /// Parses the grid file format:
    ///
    /// ```text
    /// source A = warm.bin
    /// source B = cool.bin
    /// grid:
    /// AABB
    /// ABBB
    /// ```
    ///
    /// Paths are relative to `base`. Files may hold matrices or tensors.
    pub fn parse_grid_file(text: &str, base: &Path) -> Result<Self> {
        let mut sources = BTreeMap::new();
        let mut grid = Vec::new();
        let mut in_grid = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if in_grid {
                grid.push(line.to_string());
            } else if line == "grid:" {
                in_grid = true;
            } else if let Some(rest) = line.strip_prefix("source ") {
                let (sym, path) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::format("layout file", format!("line {}: expected `source X = path`", n + 1)))?;
                let mut chars = sym.trim().chars();
                let (Some(c), None) = (chars.next(), chars.next()) else {
                    return Err(Error::format("layout file", format!("line {}: symbol must be one character", n + 1)));
                };
                sources.insert(c, storage::load_tensor(&base.join(path.trim()))?);
            } else {
                return Err(Error::format("layout file", format!("line {}: unexpected `{line}`", n + 1)));
            }
        }
        if grid.is_empty() {
            return Err(Error::format("layout file", "missing `grid:` section"));
        }
        Self::from_grid(&grid, &sources)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_grid_file(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn sources(&self) -> &[CoocTensor] {
        &self.sources
    }

    pub fn placements(&self) -> &[Placement] {
        &self.placements
    }

    /// Index of the source owning each cell.
    pub fn owners(&self) -> &Array2<usize> {
        &self.owner
    }

    fn source_cell(&self, source: usize, y: usize, x: usize) -> ndarray::ArrayView1<'_, f64> {
        let t = &self.sources[source];
        let (th, tw) = t.dim();
        t.values().slice(ndarray::s![y % th, x % tw, ..])
    }

    /// The full-canvas tensor. With `blend > 0`, cells within `blend` cells
    /// of another region mix the sources in proportion to how often each
    /// appears in that neighbourhood; cells away from borders are copied
    /// unchanged.
    pub fn assemble(&self, blend: usize, s: usize) -> Result<CoocTensor> {
        let k2 = self.sources[0].values().dim().2;
        let mut values = Array3::zeros((self.height, self.width, k2));
        let mut counts = vec![0usize; self.sources.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                counts.iter_mut().for_each(|c| *c = 0);
                for ny in y.saturating_sub(blend)..(y + blend + 1).min(self.height) {
                    for nx in x.saturating_sub(blend)..(x + blend + 1).min(self.width) {
                        counts[self.owner[[ny, nx]]] += 1;
                    }
                }
                let mut cell = values.slice_mut(ndarray::s![y, x, ..]);
                let present = counts.iter().filter(|&&c| c > 0).count();
                if present == 1 {
                    cell.assign(&self.source_cell(self.owner[[y, x]], y, x));
                    continue;
                }
                let total: usize = counts.iter().sum();
                for (src, &c) in counts.iter().enumerate() {
                    if c > 0 {
                        cell.scaled_add(c as f64 / total as f64, &self.source_cell(src, y, x));
                    }
                }
            }
        }
        CoocTensor::from_values(values, s)
    }
}

/// Generates a large texture from a layout in a single generator pass.
pub fn synth_large(ckpt: &Checkpoint, layout: &CoocLayout, seed: u64, blend: usize) -> Result<Array3<f64>> {
    let tensor = layout.assemble(blend, ckpt.stats.downsample)?;
    synthesize(ckpt, &tensor, seed)
}
