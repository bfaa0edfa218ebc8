//! Python bindings. Images cross the boundary as nested `[row][col][rgb]`
//! lists of floats in `[0, 1]`, or as PNG bytes.

use std::path::PathBuf;

use ::cooctex as core;
use core::synthesis::{self, CellRect};
use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

type Image = Vec<Vec<Vec<f64>>>;

fn image_in(img: Image) -> PyResult<Array3<f64>> {
    let h = img.len();
    let w = img.first().map_or(0, |r| r.len());
    let mut flat = Vec::with_capacity(h * w * 3);
    for row in &img {
        if row.len() != w || row.iter().any(|p| p.len() != 3) {
            return Err(PyValueError::new_err("image must be a rectangular [row][col][rgb] list"));
        }
        flat.extend(row.iter().flatten());
    }
    Array3::from_shape_vec((h, w, 3), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn image_out(img: &Array3<f64>) -> Image {
    img.outer_iter()
        .map(|row| row.outer_iter().map(|p| p.to_vec()).collect())
        .collect()
}

/// Colour palette with per-channel spreads.
#[pyclass(module = "cooctex")]
pub struct Palette {
    inner: core::Palette,
}

#[pymethods]
impl Palette {
    #[new]
    fn new(centers: Vec<[f64; 3]>, spreads: Vec<[f64; 3]>) -> PyResult<Self> {
        Ok(Self {
            inner: core::Palette::new(centers, spreads).map_err(err)?,
        })
    }

    /// Fits `k` clusters to an image.
    #[staticmethod]
    fn fit(image: Image, k: usize, seed: u64) -> PyResult<Self> {
        let img = image_in(image)?;
        Ok(Self {
            inner: core::cooc::fit_palette(img.view(), k, seed).map_err(err)?,
        })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn centers(&self) -> Vec<[f64; 3]> {
        self.inner.centers().to_vec()
    }

    fn spreads(&self) -> Vec<[f64; 3]> {
        self.inner.spreads().to_vec()
    }

    /// Tensor of an image: `patch`, `window` odd, `sigma_sq > 0`, cells of
    /// `s x s` pixels.
    fn measure(&self, image: Image, patch: usize, window: usize, sigma_sq: f64, s: usize) -> PyResult<CoocTensor> {
        let img = image_in(image)?;
        let params = core::CoocParams::new(patch, window, sigma_sq).map_err(err)?;
        Ok(CoocTensor {
            inner: core::cooc::cooc_tensor(img.view(), &self.inner, &params, s).map_err(err)?,
        })
    }
}

/// A `k x k` co-occurrence matrix summing to one.
#[pyclass(module = "cooctex", skip_from_py_object)]
#[derive(Clone)]
pub struct CoocMatrix {
    inner: core::CoocMatrix,
}

#[pymethods]
impl CoocMatrix {
    #[new]
    fn new(values: Vec<Vec<f64>>) -> PyResult<Self> {
        let k = values.len();
        if values.iter().any(|r| r.len() != k) {
            return Err(PyValueError::new_err("matrix must be square"));
        }
        let flat: Vec<f64> = values.into_iter().flatten().collect();
        let arr = Array2::from_shape_vec((k, k), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: core::CoocMatrix::new(arr).map_err(err)?,
        })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn values(&self) -> Vec<Vec<f64>> {
        self.inner.values().outer_iter().map(|r| r.to_vec()).collect()
    }

    /// Scales bins `(a, b)` and `(b, a)` by `factor` and renormalises.
    fn edit(&self, a: usize, b: usize, factor: f64) -> PyResult<Self> {
        Ok(Self {
            inner: synthesis::edit_bin(&self.inner, a, b, factor).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core::cooc::storage::save_matrix(&self.inner, &path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::cooc::storage::load_matrix(&path).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("CoocMatrix(k={})", self.inner.k())
    }
}

/// A grid of matrices, one per `s x s` pixel cell.
#[pyclass(module = "cooctex", skip_from_py_object)]
#[derive(Clone)]
pub struct CoocTensor {
    inner: core::CoocTensor,
}

#[pymethods]
impl CoocTensor {
    /// `matrix` repeated over `h x w` cells.
    #[staticmethod]
    fn constant(matrix: &CoocMatrix, h: usize, w: usize, s: usize) -> PyResult<Self> {
        Ok(Self {
            inner: core::CoocTensor::constant(&matrix.inner, h, w, s).map_err(err)?,
        })
    }

    /// `(h, w, k)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.inner.dim();
        (h, w, self.inner.k())
    }

    #[getter]
    fn s(&self) -> usize {
        self.inner.s()
    }

    fn matrix_at(&self, y: usize, x: usize) -> PyResult<CoocMatrix> {
        let (h, w) = self.inner.dim();
        if y >= h || x >= w {
            return Err(PyValueError::new_err(format!("cell ({y}, {x}) outside {h}x{w}")));
        }
        Ok(CoocMatrix {
            inner: self.inner.matrix_at(y, x),
        })
    }

    fn l1_distance(&self, other: &CoocTensor) -> PyResult<f64> {
        self.inner.l1_distance(&other.inner).map_err(err)
    }

    /// `(1 - t) self + t other`, clamped and renormalised outside `[0, 1]`.
    fn interpolate(&self, other: &CoocTensor, t: f64) -> PyResult<Self> {
        Ok(Self {
            inner: synthesis::interpolate_tensors(&self.inner, &other.inner, t).map_err(err)?,
        })
    }

    /// Bin edit over all cells, or over `region = (y, x, h, w)`.
    #[pyo3(signature = (a, b, factor, region=None))]
    fn edit(&self, a: usize, b: usize, factor: f64, region: Option<(usize, usize, usize, usize)>) -> PyResult<Self> {
        let region = region.map(|(y, x, h, w)| CellRect { y, x, h, w });
        Ok(Self {
            inner: synthesis::edit_tensor(&self.inner, region, a, b, factor).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core::cooc::storage::save_tensor(&self.inner, &path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::cooc::storage::load_tensor(&path).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        let (h, w, k) = self.shape();
        format!("CoocTensor(h={h}, w={w}, k={k}, s={})", self.inner.s())
    }
}

/// A trained (or freshly initialised) generator with its statistics.
#[pyclass(module = "cooctex")]
pub struct Checkpoint {
    inner: core::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::Checkpoint::load(&path).map_err(err)?,
        })
    }

    /// Untrained desk-size model whose statistics come from `image`.
    #[staticmethod]
    fn untrained(image: Image, seed: u64) -> PyResult<Self> {
        let img = image_in(image)?;
        let mut run = core::config::RunConfig::desk();
        run.seed = seed;
        let palette = core::cooc::fit_palette(img.view(), run.k, seed).map_err(err)?;
        let tensor = core::cooc::cooc_tensor_unchecked(img.view(), &palette, &run.cooc, run.downsample).map_err(err)?;
        let stats = core::CoocStats {
            palette,
            normalizer: Some(core::Normalizer::fit([&tensor]).map_err(err)?),
            params: run.cooc,
            downsample: run.downsample,
            seed,
        };
        Ok(Self {
            inner: core::training::init_checkpoint(stats, &run).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.stats.palette.k()
    }

    #[getter]
    fn scale(&self) -> usize {
        self.inner.stats.downsample
    }

    fn palette(&self) -> Palette {
        Palette {
            inner: self.inner.stats.palette.clone(),
        }
    }

    /// Tensor of an image under this model's statistics.
    fn measure(&self, image: Image) -> PyResult<CoocTensor> {
        let img = image_in(image)?;
        Ok(CoocTensor {
            inner: core::evaluation::measure(&self.inner.stats, img.view()).map_err(err)?,
        })
    }

    fn synthesize(&self, py: Python<'_>, tensor: &CoocTensor, seed: u64) -> PyResult<Image> {
        let t = tensor.inner.clone();
        let img = py.detach(|| synthesis::synthesize(&self.inner, &t, seed)).map_err(err)?;
        Ok(image_out(&img))
    }

    fn synthesize_png<'py>(&self, py: Python<'py>, tensor: &CoocTensor, seed: u64) -> PyResult<Bound<'py, PyBytes>> {
        let t = tensor.inner.clone();
        let png = py
            .detach(|| synthesis::synthesize(&self.inner, &t, seed).and_then(|img| core::imageio::encode_png(img.view())))
            .map_err(err)?;
        Ok(PyBytes::new(py, &png))
    }
}

/// Procedural test texture: `blobs`, `cells`, `stripes` or `graded`.
#[pyfunction]
fn procedural(pattern: &str, h: usize, w: usize, seed: u64) -> PyResult<Image> {
    let p: core::procedural::Pattern = pattern.parse().map_err(err)?;
    Ok(image_out(&core::procedural::generate(p, h, w, seed)))
}

#[pyfunction]
fn load_image(path: PathBuf) -> PyResult<Image> {
    Ok(image_out(&core::imageio::load(&path).map_err(err)?))
}

#[pyfunction]
fn save_image(image: Image, path: PathBuf) -> PyResult<()> {
    core::imageio::save_png(image_in(image)?.view(), &path).map_err(err)
}

#[pymodule]
#[pyo3(name = "cooctex")]
fn cooctex_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Palette>()?;
    m.add_class::<CoocMatrix>()?;
    m.add_class::<CoocTensor>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(procedural, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    Ok(())
}
