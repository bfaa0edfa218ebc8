//! Evaluation protocols: the stability (degradation) loop, nearest-neighbour
//! novelty audits and fidelity/diversity grids.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cooc::{cooc_tensor_unchecked, CoocStats, CoocTensor};
use crate::error::{Error, Result};
use crate::imageio;
use crate::model::{Checkpoint, NoiseTensor};
use crate::synthesis::{synthesize, synthesize_with_noise};

/// Per-iteration record of a stability loop. `distances[i]` is
/// `|C_in - C_out|_1` at iteration `i`; iteration 0 is the one-shot loss on
/// the starting tensor.
#[derive(Debug, Clone)]
pub struct StabilityTrace {
    pub distances: Vec<f64>,
    pub images: Vec<Array3<f64>>,
}

impl StabilityTrace {
    pub fn iterations(&self) -> usize {
        self.distances.len() - 1
    }
}

/// The tensor of a generated image under the checkpoint's statistics.
pub fn measure(stats: &CoocStats, image: ArrayView3<f64>) -> Result<CoocTensor> {
    cooc_tensor_unchecked(image, &stats.palette, &stats.params, stats.downsample)
}

/// Synthesises from `c0`, measures the result and feeds that measurement
/// back in, `iters` times, always with the same noise.
pub fn stability_loop(ckpt: &Checkpoint, c0: &CoocTensor, seed: u64, iters: usize) -> Result<StabilityTrace> {
    if iters == 0 {
        return Err(Error::invalid("stability loop needs at least one iteration"));
    }
    let (h, w) = c0.dim();
    let noise = NoiseTensor::sample(h, w, ckpt.generator.config().noise_channels, seed);
    let mut input = c0.clone();
    let mut trace = StabilityTrace {
        distances: Vec::with_capacity(iters + 1),
        images: Vec::with_capacity(iters + 1),
    };
    for _ in 0..=iters {
        let image = synthesize_with_noise(ckpt, &input, &noise)?;
        let output = measure(&ckpt.stats, image.view())?;
        trace.distances.push(input.l1_distance(&output)?);
        trace.images.push(image);
        input = output;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Mean distance per iteration over all traces.
    pub means: Vec<f64>,
    /// `max_{i >= 1} |m_i - m_1| / m_1`.
    pub drift: f64,
}

pub fn stability_report(traces: &[StabilityTrace]) -> Result<StabilityReport> {
    let first = traces.first().ok_or_else(|| Error::invalid("no stability traces"))?;
    let n = first.distances.len();
    if n < 2 || traces.iter().any(|t| t.distances.len() != n) {
        return Err(Error::invalid("stability traces must share an iteration count >= 1"));
    }
    let means: Vec<f64> = (0..n)
        .map(|i| traces.iter().map(|t| t.distances[i]).sum::<f64>() / traces.len() as f64)
        .collect();
    let reference = means[1];
    let drift = if reference > 0.0 {
        means[1..].iter().map(|m| (m - reference).abs() / reference).fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok(StabilityReport { means, drift })
}

/// One row per trace, one column per iteration, then a `mean` row.
pub fn write_stability_csv(path: &Path, traces: &[StabilityTrace], report: &StabilityReport) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    let mut header = vec!["item".to_string()];
    header.extend((0..report.means.len()).map(|i| format!("iter_{i}")));
    out.write_record(&header)?;
    for (i, t) in traces.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(t.distances.iter().map(|d| d.to_string()));
        out.write_record(&row)?;
    }
    let mut row = vec!["mean".to_string()];
    row.extend(report.means.iter().map(|d| d.to_string()));
    out.write_record(&row)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub enum Metric<'a> {
    /// Mean absolute RGB difference over equally sized images.
    RgbL1,
    /// L1 distance between the images' tensors.
    CoocL1(&'a CoocStats),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

pub fn rgb_l1(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64)
}

/// Exhaustive search over `candidates`, returning the `top_m` closest,
/// nearest first, ties broken by index. A query larger than the
/// candidates is centre-cropped to their size.
pub fn nearest_neighbors(query: ArrayView3<f64>, candidates: &[ArrayView3<f64>], metric: Metric<'_>, top_m: usize) -> Result<Vec<Neighbor>> {
    let first = candidates.first().ok_or_else(|| Error::invalid("no candidates to search"))?;
    let (ch, cw, _) = first.dim();
    let q = imageio::center_crop(query, ch, cw)?;
    let mut found: Vec<Neighbor> = match metric {
        Metric::RgbL1 => candidates
            .par_iter()
            .enumerate()
            .map(|(index, c)| Ok(Neighbor { index, distance: rgb_l1(q, *c)? }))
            .collect::<Result<_>>()?,
        Metric::CoocL1(stats) => {
            let tq = measure(stats, q)?;
            candidates
                .par_iter()
                .enumerate()
                .map(|(index, c)| {
                    let distance = tq.l1_distance(&measure(stats, *c)?)?;
                    Ok(Neighbor { index, distance })
                })
                .collect::<Result<_>>()?
        }
    };
    found.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    found.truncate(top_m);
    Ok(found)
}

/// Rows are seeds, columns are tensors; cells are butted together without
/// gaps.
pub fn diversity_grid(ckpt: &Checkpoint, tensors: &[CoocTensor], seeds: &[u64]) -> Result<Array3<f64>> {
    let first = tensors.first().ok_or_else(|| Error::invalid("grid needs at least one tensor"))?;
    if seeds.is_empty() {
        return Err(Error::invalid("grid needs at least one seed"));
    }
    if tensors.iter().any(|t| t.values().dim() != first.values().dim()) {
        return Err(Error::invalid("grid tensors must share a shape"));
    }
    let (ch, cw) = first.pixel_dim();
    let mut grid = Array3::zeros((ch * seeds.len(), cw * tensors.len(), 3));
    for (r, &seed) in seeds.iter().enumerate() {
        for (c, t) in tensors.iter().enumerate() {
            let cell = synthesize(ckpt, t, seed)?;
            grid.slice_mut(s![r * ch..(r + 1) * ch, c * cw..(c + 1) * cw, ..]).assign(&cell);
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// Mean `|C(G(c_i)) - c_i|_1`.
    pub matched: f64,
    /// Mean `|C(G(c_i)) - c_{pi(i)}|_1` for a derangement `pi`.
    pub shuffled: f64,
}

impl Fidelity {
    pub fn ratio(&self) -> f64 {
        self.shuffled / self.matched
    }
}

/// Synthesises from every condition and compares each result with its own
/// condition and with the next one (cyclic shift). Needs at least two
/// conditions.
pub fn condition_fidelity(ckpt: &Checkpoint, conditions: &[CoocTensor], seed: u64) -> Result<Fidelity> {
    let n = conditions.len();
    if n < 2 {
        return Err(Error::invalid("fidelity needs at least two conditions"));
    }
    let measured: Vec<CoocTensor> = conditions
        .iter()
        .enumerate()
        .map(|(i, c)| measure(&ckpt.stats, synthesize(ckpt, c, crate::seed::derive_indexed(seed, "fidelity", i as u64))?.view()))
        .collect::<Result<_>>()?;
    let mut matched = 0.0;
    let mut shuffled = 0.0;
    for (i, m) in measured.iter().enumerate() {
        matched += m.l1_distance(&conditions[i])?;
        shuffled += m.l1_distance(&conditions[(i + 1) % n])?;
    }
    Ok(Fidelity {
        matched: matched / n as f64,
        shuffled: shuffled / n as f64,
    })
}

/// Pretty-printed JSON summary of an experiment.
pub fn write_summary<T: Serialize>(path: &Path, summary: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, summary)?;
    f.write_all(b"\n")?;
    Ok(())
}
