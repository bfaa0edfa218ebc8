//! Crop sampling, per-crop co-occurrence tensors and the on-disk cache.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{info, warn};
use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::cooc::{cooc_tensor, fit_palette, CoocParams, CoocStats, CoocTensor, Normalizer};
use crate::error::{Error, Result};
use crate::{config, imageio, seed};

pub const CACHE_MAGIC: [u8; 8] = *b"COOCDATA";
const CACHE_VERSION: u32 = 1;
pub const CACHE_ENV: &str = "COOCTEX_CACHE_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub crops: usize,
    pub crop_size: usize,
    pub train_fraction: f64,
    pub k: usize,
    pub params: CoocParams,
    pub downsample: usize,
    pub seed: u64,
}

/// Everything that determines a dataset's contents.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub exemplar: String,
    pub exemplar_sha256: String,
    pub config: DatasetConfig,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "exemplar = {}", self.exemplar);
        let _ = writeln!(out, "exemplar_sha256 = {}", self.exemplar_sha256);
        let _ = writeln!(out, "crops = {}", c.crops);
        let _ = writeln!(out, "crop_size = {}", c.crop_size);
        let _ = writeln!(out, "train_fraction = {}", c.train_fraction);
        let _ = writeln!(out, "k = {}", c.k);
        let _ = writeln!(out, "patch_size = {}", c.params.patch_size);
        let _ = writeln!(out, "window_size = {}", c.params.window_size);
        let _ = writeln!(out, "sigma_sq = {}", c.params.sigma_sq);
        let _ = writeln!(out, "downsample = {}", c.downsample);
        let _ = writeln!(out, "seed = {}", c.seed);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = config::parse_pairs(text)?;
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format("dataset manifest", format!("missing `{key}`")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::format("dataset manifest", format!("bad `{key}`")))
        };
        for (k, _) in &pairs {
            if !MANIFEST_KEYS.contains(&k.as_str()) {
                return Err(Error::UnknownKey(k.clone()));
            }
        }
        Ok(Self {
            exemplar: get("exemplar")?.to_string(),
            exemplar_sha256: get("exemplar_sha256")?.to_string(),
            config: DatasetConfig {
                crops: num("crops")? as usize,
                crop_size: num("crop_size")? as usize,
                train_fraction: num("train_fraction")?,
                k: num("k")? as usize,
                params: CoocParams::new(num("patch_size")? as usize, num("window_size")? as usize, num("sigma_sq")?)?,
                downsample: num("downsample")? as usize,
                seed: get("seed")?
                    .parse()
                    .map_err(|_| Error::format("dataset manifest", "bad `seed`"))?,
            },
        })
    }

    /// Cache key: a digest of everything except the exemplar's path.
    pub fn key(&self) -> String {
        let text: String = self.to_text().lines().skip(1).collect::<Vec<_>>().join("\n");
        let digest = Sha256::digest(text.as_bytes());
        digest[..12].iter().map(|b| format!("{b:02x}")).collect()
    }
}

const MANIFEST_KEYS: &[&str] = &[
    "exemplar",
    "exemplar_sha256",
    "crops",
    "crop_size",
    "train_fraction",
    "k",
    "patch_size",
    "window_size",
    "sigma_sq",
    "downsample",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub origin: (usize, usize),
    /// `(n, n, 3)` in `[0, 1]`.
    pub pixels: Array3<f64>,
    pub tensor: CoocTensor,
    pub normalized: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub stats: CoocStats,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// `count` uniformly random top-left corners of `size × size` crops.
pub fn extract_crops(height: usize, width: usize, count: usize, size: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if height < size || width < size {
        return Err(Error::invalid(format!(
            "exemplar {height}x{width} is smaller than the {size}x{size} crop"
        )));
    }
    let mut rng = seed::rng(seed, "crops");
    Ok((0..count)
        .map(|_| (rng.random_range(0..=height - size), rng.random_range(0..=width - size)))
        .collect())
}

/// Shuffled train/test split by index. Test crops whose origin also occurs
/// in the training split are moved to training, so origin sets are disjoint.
pub fn split_indices(origins: &[(usize, usize)], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..origins.len()).collect();
    order.shuffle(&mut seed::rng(seed, "split"));
    let n_train = ((origins.len() as f64 * train_fraction).round() as usize).min(origins.len());
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let seen: HashSet<(usize, usize)> = train.iter().map(|&i| origins[i]).collect();
    let mut test = Vec::new();
    for &i in &order[n_train..] {
        if seen.contains(&origins[i]) {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    (train, test)
}

pub fn default_cache_root() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".cooctex-cache"))
}

fn crop(image: &Array3<f64>, origin: (usize, usize), n: usize) -> Array3<f64> {
    image.slice(s![origin.0..origin.0 + n, origin.1..origin.1 + n, ..]).to_owned()
}

struct Raw {
    origins: Vec<(usize, usize)>,
    train: Vec<usize>,
    test: Vec<usize>,
    crops: Vec<Array3<f64>>,
    tensors: Vec<CoocTensor>,
    stats: CoocStats,
}

fn compute(exemplar: &RgbImage, cfg: &DatasetConfig) -> Result<Raw> {
    let image = imageio::from_rgb8(exemplar);
    let (h, w, _) = image.dim();
    if cfg.crop_size % cfg.downsample != 0 {
        return Err(Error::invalid("crop size must be a multiple of the downsampling factor"));
    }
    let origins = extract_crops(h, w, cfg.crops, cfg.crop_size, cfg.seed)?;
    let (train, test) = split_indices(&origins, cfg.train_fraction, cfg.seed);
    let palette = fit_palette(image.view(), cfg.k, seed::derive(cfg.seed, "palette"))?;
    let crops: Vec<Array3<f64>> = origins.iter().map(|&o| crop(&image, o, cfg.crop_size)).collect();
    info!("computing co-occurrence tensors for {} crops", crops.len());
    let tensors = crops
        .par_iter()
        .map(|c| cooc_tensor(c.view(), &palette, &cfg.params, cfg.downsample))
        .collect::<Result<Vec<_>>>()?;
    let normalizer = Normalizer::fit(train.iter().map(|&i| &tensors[i]))?;
    let stats = CoocStats {
        palette,
        normalizer: Some(normalizer),
        params: cfg.params,
        downsample: cfg.downsample,
        seed: cfg.seed,
    };
    Ok(Raw {
        origins,
        train,
        test,
        crops,
        tensors,
        stats,
    })
}

fn assemble(manifest: DatasetManifest, raw: Raw) -> Result<Dataset> {
    let normalizer = raw.stats.normalizer()?.clone();
    let sample = |i: usize| -> Result<Sample> {
        Ok(Sample {
            origin: raw.origins[i],
            pixels: raw.crops[i].clone(),
            tensor: raw.tensors[i].clone(),
            normalized: normalizer.normalize(&raw.tensors[i])?,
        })
    };
    Ok(Dataset {
        train: raw.train.iter().map(|&i| sample(i)).collect::<Result<_>>()?,
        test: raw.test.iter().map(|&i| sample(i)).collect::<Result<_>>()?,
        manifest,
        stats: raw.stats,
    })
}

fn to_container(manifest: &DatasetManifest, raw: &Raw) -> Result<Container> {
    let mut c = Container::new(CACHE_MAGIC, CACHE_VERSION);
    c.push_text("manifest", manifest.to_text());
    raw.stats.write_into(&mut c, "stats.");
    let n = raw.origins.len();
    c.push_f64(
        "origins",
        &[n, 2],
        raw.origins.iter().flat_map(|&(y, x)| [y as f64, x as f64]).collect(),
    );
    c.push_f64("train", &[raw.train.len()], raw.train.iter().map(|&i| i as f64).collect());
    c.push_f64("test", &[raw.test.len()], raw.test.iter().map(|&i| i as f64).collect());
    for i in 0..n {
        c.push_bytes(format!("crop.{i}"), imageio::encode_png(raw.crops[i].view())?);
        let t = raw.tensors[i].values();
        let (th, tw, ch) = t.dim();
        c.push_f64(format!("tensor.{i}"), &[th, tw, ch], t.iter().copied().collect());
    }
    Ok(c)
}

fn from_container(c: &Container) -> Result<(DatasetManifest, Raw)> {
    let manifest = DatasetManifest::from_text(c.text("manifest")?)?;
    let stats = CoocStats::read_from(c, "stats.")?;
    let origins: Vec<(usize, usize)> = c
        .f64("origins")?
        .1
        .chunks_exact(2)
        .map(|p| (p[0] as usize, p[1] as usize))
        .collect();
    let index = |name: &str| -> Result<Vec<usize>> { Ok(c.f64(name)?.1.iter().map(|&v| v as usize).collect()) };
    let (train, test) = (index("train")?, index("test")?);
    let mut crops = Vec::with_capacity(origins.len());
    let mut tensors = Vec::with_capacity(origins.len());
    for i in 0..origins.len() {
        crops.push(imageio::decode(c.bytes(&format!("crop.{i}"))?)?);
        let (shape, data) = c.f64(&format!("tensor.{i}"))?;
        if shape.len() != 3 {
            return Err(Error::format("dataset cache", "tensor rank"));
        }
        let values = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data.to_vec())
            .map_err(|e| Error::format("dataset cache", e.to_string()))?;
        tensors.push(CoocTensor::from_values(values, stats.downsample)?);
    }
    if train.iter().chain(&test).any(|&i| i >= origins.len()) {
        return Err(Error::format("dataset cache", "split index out of range"));
    }
    Ok((
        manifest,
        Raw {
            origins,
            train,
            test,
            crops,
            tensors,
            stats,
        },
    ))
}

/// Builds a dataset from an in-memory exemplar without touching the cache.
pub fn build_from_image(exemplar: &RgbImage, label: &str, cfg: &DatasetConfig) -> Result<Dataset> {
    let manifest = DatasetManifest {
        exemplar: label.to_string(),
        exemplar_sha256: imageio::content_hash(exemplar),
        config: cfg.clone(),
    };
    let raw = compute(exemplar, cfg)?;
    assemble(manifest, raw)
}

/// Builds the dataset for `exemplar_path`, reusing `<cache_root>/<key>/`
/// when its manifest matches. A corrupt cache is rebuilt.
pub fn build_dataset(exemplar_path: &Path, cfg: &DatasetConfig, cache_root: &Path) -> Result<Dataset> {
    let exemplar = imageio::load_rgb8(exemplar_path)?;
    let manifest = DatasetManifest {
        exemplar: exemplar_path.display().to_string(),
        exemplar_sha256: imageio::content_hash(&exemplar),
        config: cfg.clone(),
    };
    let dir = cache_root.join(manifest.key());
    let file = dir.join("dataset.bin");
    if file.exists() {
        match Container::load(&file, CACHE_MAGIC, CACHE_VERSION).and_then(|c| from_container(&c)) {
            Ok((cached, raw)) if cached.key() == manifest.key() => {
                info!("using cached dataset {}", file.display());
                return assemble(manifest, raw);
            }
            Ok(_) => warn!("cache {} belongs to different inputs; rebuilding", file.display()),
            Err(e) => warn!("cache {} unusable ({e}); rebuilding", file.display()),
        }
    }
    let raw = compute(&exemplar, cfg)?;
    std::fs::create_dir_all(&dir)?;
    to_container(&manifest, &raw)?.save(&file)?;
    std::fs::write(dir.join("manifest.txt"), manifest.to_text())?;
    assemble(manifest, raw)
}

/// Location of the cache file `build_dataset` uses.
pub fn cache_file(exemplar_path: &Path, cfg: &DatasetConfig, cache_root: &Path) -> Result<PathBuf> {
    let exemplar = imageio::load_rgb8(exemplar_path)?;
    let manifest = DatasetManifest {
        exemplar: exemplar_path.display().to_string(),
        exemplar_sha256: imageio::content_hash(&exemplar),
        config: cfg.clone(),
    };
    Ok(cache_root.join(manifest.key()).join("dataset.bin"))
}

impl Dataset {
    /// Training-set minibatches for `epoch`, a deterministic function of the
    /// dataset seed and the epoch. The final batch may be short.
    pub fn batches(&self, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut seed::rng_indexed(self.manifest.config.seed, "epoch", epoch as u64));
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}
