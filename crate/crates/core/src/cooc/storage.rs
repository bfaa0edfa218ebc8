//! On-disk formats for palettes, normalisers, tensors and matrices.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{CoocMatrix, CoocParams, CoocTensor, Normalizer, Palette};
use crate::container::Container;
use crate::error::{Error, Result};

pub const STATS_MAGIC: [u8; 8] = *b"COOCSTAT";
pub const TENSOR_MAGIC: [u8; 8] = *b"COOCTNSR";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to recompute and normalise statistics consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoocStats {
    pub palette: Palette,
    pub normalizer: Option<Normalizer>,
    pub params: CoocParams,
    pub downsample: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct StatsHeader {
    k: usize,
    params: CoocParams,
    downsample: usize,
    seed: u64,
}

impl CoocStats {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(STATS_MAGIC, FORMAT_VERSION);
        self.write_into(&mut c, "");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        Self::read_from(c, "")
    }

    /// Appends the statistics as entries named with `prefix`.
    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        let k = self.palette.k();
        let header = StatsHeader {
            k,
            params: self.params,
            downsample: self.downsample,
            seed: self.seed,
        };
        c.push_text(format!("{prefix}header"), serde_json::to_string(&header).expect("serializable header"));
        c.push_f64(format!("{prefix}centers"), &[k, 3], self.palette.centers().iter().flatten().copied().collect());
        c.push_f64(format!("{prefix}spreads"), &[k, 3], self.palette.spreads().iter().flatten().copied().collect());
        if let Some(n) = &self.normalizer {
            c.push_f64(format!("{prefix}norm_mean"), &[n.mean.len()], n.mean.clone());
            c.push_f64(format!("{prefix}norm_std"), &[n.std.len()], n.std.clone());
        }
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let header: StatsHeader = serde_json::from_str(c.text(&format!("{prefix}header"))?)?;
        let rows = |name: &str| -> Result<Vec<[f64; 3]>> {
            let (shape, data) = c.f64(&format!("{prefix}{name}"))?;
            if shape != [header.k, 3] {
                return Err(Error::format("statistics", format!("{name} has shape {shape:?}")));
            }
            Ok(data.chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect())
        };
        let palette = Palette::new(rows("centers")?, rows("spreads")?)?;
        let (mean, std) = (format!("{prefix}norm_mean"), format!("{prefix}norm_std"));
        let normalizer = match (c.get(&mean), c.get(&std)) {
            (Some(_), Some(_)) => Some(Normalizer::new(c.f64(&mean)?.1.to_vec(), c.f64(&std)?.1.to_vec())?),
            _ => None,
        };
        header.params.validate()?;
        if header.downsample == 0 {
            return Err(Error::format("statistics", "downsampling factor is zero"));
        }
        Ok(Self {
            palette,
            normalizer,
            params: header.params,
            downsample: header.downsample,
            seed: header.seed,
        })
    }

    pub fn normalizer(&self) -> Result<&Normalizer> {
        self.normalizer
            .as_ref()
            .ok_or_else(|| Error::invalid("statistics carry no fitted normalizer"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, STATS_MAGIC, FORMAT_VERSION)?)
    }
}

pub fn save_tensor(tensor: &CoocTensor, path: &Path) -> Result<()> {
    let mut c = Container::new(TENSOR_MAGIC, FORMAT_VERSION);
    c.push_text("kind", "tensor");
    let (h, w, ch) = tensor.values().dim();
    c.push_f64("downsample", &[1], vec![tensor.s() as f64]);
    c.push_f64("values", &[h, w, ch], tensor.values().iter().copied().collect());
    c.save(path)
}

pub fn load_tensor(path: &Path) -> Result<CoocTensor> {
    let c = Container::load(path, TENSOR_MAGIC, FORMAT_VERSION)?;
    let (shape, data) = c.f64("values")?;
    match c.text("kind")? {
        "tensor" => {
            if shape.len() != 3 {
                return Err(Error::format("tensor file", format!("rank {}", shape.len())));
            }
            let s = c.f64("downsample")?.1.first().copied().unwrap_or(1.0) as usize;
            let values = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data.to_vec())
                .map_err(|e| Error::format("tensor file", e.to_string()))?;
            CoocTensor::from_values(values, s)
        }
        // a stored matrix is a 1 x 1 tensor
        "matrix" => {
            let m = matrix_from(shape, data)?;
            CoocTensor::from_matrix(&m, 1)
        }
        other => Err(Error::format("tensor file", format!("unknown kind `{other}`"))),
    }
}

fn matrix_from(shape: &[usize], data: &[f64]) -> Result<CoocMatrix> {
    if shape.len() != 2 {
        return Err(Error::format("matrix file", format!("rank {}", shape.len())));
    }
    CoocMatrix::new(
        Array2::from_shape_vec((shape[0], shape[1]), data.to_vec()).map_err(|e| Error::format("matrix file", e.to_string()))?,
    )
}

pub fn save_matrix(m: &CoocMatrix, path: &Path) -> Result<()> {
    let mut c = Container::new(TENSOR_MAGIC, FORMAT_VERSION);
    c.push_text("kind", "matrix");
    c.push_f64("values", &[m.k(), m.k()], m.row_stacked());
    c.save(path)
}

pub fn load_matrix(path: &Path) -> Result<CoocMatrix> {
    let c = Container::load(path, TENSOR_MAGIC, FORMAT_VERSION)?;
    match c.text("kind")? {
        "matrix" => {
            let (shape, data) = c.f64("values")?;
            matrix_from(shape, data)
        }
        "tensor" => {
            let t = load_tensor(path)?;
            if t.dim() != (1, 1) {
                return Err(Error::format("matrix file", "tensor has more than one position"));
            }
            Ok(t.matrix_at(0, 0))
        }
        other => Err(Error::format("matrix file", format!("unknown kind `{other}`"))),
    }
}
