//! `cooctex` command-line interface. Every subcommand resolves its
//! arguments, calls the library and writes a manifest of the resolved
//! configuration next to its outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cooctex::config::RunConfig;
use cooctex::cooc::{cooc_tensor, fit_palette, storage, CoocStats};
use cooctex::dataset::{build_dataset, default_cache_root, Dataset};
use cooctex::evaluation::{self, Metric};
use cooctex::synthesis::{self, CellRect, CoocLayout, MorphSpec};
use cooctex::training::{self, TrainOptions};
use cooctex::{imageio, seed, Checkpoint, CoocTensor};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "cooctex", version, about = "Co-occurrence conditioned texture synthesis")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size model and statistics.
    Full,
    /// Reduced sizes that train on a CPU.
    Desk,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Starting configuration before the config file and overrides.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed; every component derives its own sub-seed from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Dataset cache root (defaults to $COOCTEX_CACHE_DIR or .cooctex-cache).
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the colour palette of an exemplar.
    FitPalette {
        #[arg(long)]
        image: PathBuf,
    },
    /// Extract crops and their tensors (cached).
    BuildDataset {
        #[arg(long)]
        image: PathBuf,
        /// Also write the first N held-out tensors to `tensors/`.
        #[arg(long, default_value_t = 0)]
        export: usize,
    },
    /// Train a generator on an exemplar.
    Train {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from `checkpoint.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Synthesise a texture from a stored tensor or an image's statistics.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        source: Source,
        /// Repeat a single matrix over `H,W` cells.
        #[arg(long, value_parser = parse_pair)]
        cells: Option<(usize, usize)>,
        #[arg(long, default_value = "synth.png")]
        name: String,
    },
    /// Synthesise from `(1 - t) A + t B`.
    Interp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        t: f64,
        #[arg(long, default_value = "interp")]
        name: String,
    },
    /// Frames morphing from A to B with fixed noise.
    Morph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        t0: f64,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        t1: f64,
        /// Also write an animated GIF with this frame delay.
        #[arg(long)]
        gif_delay_ms: Option<u32>,
    },
    /// Scale one bin of a stored matrix or tensor and renormalise.
    Edit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_pair)]
        bin: (usize, usize),
        #[arg(long)]
        factor: f64,
        /// Restrict to cells `Y,X` or `Y,X,H,W` of a tensor.
        #[arg(long)]
        cell: Option<String>,
        #[arg(long, default_value = "edited.bin")]
        name: String,
    },
    /// Large texture from a grid layout file, in one generator pass.
    Tile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, default_value_t = 1)]
        blend: usize,
        #[arg(long, default_value = "tile.png")]
        name: String,
    },
    /// Re-feed generated statistics and report drift.
    EvalStability {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        items: Items,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
    /// Nearest training crops of generated samples.
    EvalNovelty {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        top: usize,
    },
    /// Grid of seeds (rows) by interpolation steps from A to B (columns).
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "grid.png")]
        name: String,
    },
    /// Run the HTTP editing service.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = cooctex_service::DEFAULT_QUEUE_DEPTH)]
        queue_depth: usize,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Source {
    /// Stored tensor or matrix.
    #[arg(long)]
    pub tensor: Option<PathBuf>,
    /// Image whose statistics condition the generator.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = true)]
pub struct Items {
    /// Stored tensors to start from. Repeatable.
    #[arg(long)]
    pub tensor: Vec<PathBuf>,
    /// Exemplar whose held-out tensors to start from.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// At most this many held-out tensors.
    #[arg(long, default_value_t = 10)]
    pub limit: usize,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `A,B`, got `{s}`"))?;
    Ok((
        a.trim().parse().map_err(|e| format!("{a}: {e}"))?,
        b.trim().parse().map_err(|e| format!("{b}: {e}"))?,
    ))
}

fn parse_cell(s: &str) -> Result<CellRect> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad cell `{s}`"))?;
    match v[..] {
        [y, x] => Ok(CellRect { y, x, h: 1, w: 1 }),
        [y, x, h, w] => Ok(CellRect { y, x, h, w }),
        _ => bail!("cell must be `Y,X` or `Y,X,H,W`, got `{s}`"),
    }
}

/// Preset, then config file, then overrides, then `--seed`.
pub fn resolve_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match g.preset {
        Preset::Full => RunConfig::default(),
        Preset::Desk => RunConfig::desk(),
    };
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for o in &g.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    cache: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&self, image: &Path) -> Result<Dataset> {
        Ok(build_dataset(image, &self.cfg.dataset_config(), &self.cache)?)
    }
}

fn write_manifest(ctx: &Ctx, command: &str, argv: &[OsString]) -> Result<()> {
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let text = format!(
        "# cooctex {}\n# command: {}\n# argv: {}\n{}",
        env!("CARGO_PKG_VERSION"),
        command,
        args.join(" "),
        ctx.cfg.to_text()
    );
    std::fs::write(ctx.path(&format!("{command}.manifest.txt")), text)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_tensor(path: &Path) -> Result<CoocTensor> {
    storage::load_tensor(path).with_context(|| format!("loading tensor {}", path.display()))
}

/// A stored tensor at the checkpoint's scale; a stored matrix becomes a
/// constant tensor over `cells` (default 4 x 4).
fn condition(ckpt: &Checkpoint, path: &Path, cells: Option<(usize, usize)>) -> Result<CoocTensor> {
    let t = load_tensor(path)?;
    let s = ckpt.stats.downsample;
    if t.dim() == (1, 1) && (t.s() != s || cells.is_some()) {
        let (h, w) = cells.unwrap_or((4, 4));
        return Ok(CoocTensor::constant(&t.matrix_at(0, 0), h, w, s)?);
    }
    if cells.is_some() {
        bail!("--cells only applies to a single matrix");
    }
    Ok(CoocTensor::from_values(t.into_values(), s)?)
}

fn measure_image(stats: &CoocStats, path: &Path) -> Result<CoocTensor> {
    let img = imageio::load(path)?;
    Ok(cooc_tensor(img.view(), &stats.palette, &stats.params, stats.downsample)?)
}

fn name_of(c: &Command) -> &'static str {
    match c {
        Command::FitPalette { .. } => "fit-palette",
        Command::BuildDataset { .. } => "build-dataset",
        Command::Train { .. } => "train",
        Command::Synth { .. } => "synth",
        Command::Interp { .. } => "interp",
        Command::Morph { .. } => "morph",
        Command::Edit { .. } => "edit",
        Command::Tile { .. } => "tile",
        Command::EvalStability { .. } => "eval-stability",
        Command::EvalNovelty { .. } => "eval-novelty",
        Command::Grid { .. } => "grid",
        Command::Serve { .. } => "serve",
    }
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 2 for usage errors, 1 for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(cli: Cli, argv: &[OsString]) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    std::fs::create_dir_all(&cli.global.out)?;
    let ctx = Ctx {
        cfg,
        out: cli.global.out.clone(),
        cache: cli.global.cache.clone().unwrap_or_else(default_cache_root),
    };
    let command = name_of(&cli.command);
    write_manifest(&ctx, command, argv)?;
    let seed = ctx.cfg.seed;
    match cli.command {
        Command::FitPalette { image } => {
            let img = imageio::load(&image)?;
            let palette = fit_palette(img.view(), ctx.cfg.k, seed::derive(seed, "palette"))?;
            let stats = CoocStats {
                palette,
                normalizer: None,
                params: ctx.cfg.cooc,
                downsample: ctx.cfg.downsample,
                seed,
            };
            stats.save(&ctx.path("stats.bin"))?;
            let summary = json!({ "k": stats.palette.k(), "centers": stats.palette.centers(), "spreads": stats.palette.spreads() });
            evaluation::write_summary(&ctx.path("palette.json"), &summary)?;
        }
        Command::BuildDataset { image, export } => {
            let ds = ctx.dataset(&image)?;
            ds.stats.save(&ctx.path("stats.bin"))?;
            if export > 0 {
                let dir = ctx.path("tensors");
                std::fs::create_dir_all(&dir)?;
                for (i, s) in ds.test.iter().take(export).enumerate() {
                    storage::save_tensor(&s.tensor, &dir.join(format!("test_{i:03}.bin")))?;
                }
            }
            let summary = json!({
                "train": ds.train.len(),
                "test": ds.test.len(),
                "key": ds.manifest.key(),
                "cache": cooctex::dataset::cache_file(&image, &ctx.cfg.dataset_config(), &ctx.cache)?,
            });
            evaluation::write_summary(&ctx.path("dataset.json"), &summary)?;
        }
        Command::Train { image, epochs, resume } => {
            let mut train_cfg = ctx.cfg.train.clone();
            if let Some(e) = epochs {
                train_cfg.epochs = e;
            }
            let ds = ctx.dataset(&image)?;
            let ckpt_path = ctx.path(training::CHECKPOINT_FILE);
            let ckpt = if resume {
                load_checkpoint(&ckpt_path)?
            } else {
                training::init_checkpoint(ds.stats.clone(), &ctx.cfg)?
            };
            let opts = TrainOptions { out_dir: Some(ctx.out.clone()) };
            let (ckpt, _) = training::train(ckpt, &ds, &train_cfg, seed, &opts, |epoch, _, log| {
                let cooc = log.epoch_mean(epoch, |r| r.cooc).unwrap_or(f64::NAN);
                log::info!("epoch {epoch} done, cooc loss {cooc:.4}");
            })?;
            ckpt.save(&ckpt_path)?;
        }
        Command::Synth { checkpoint, source, cells, name } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let tensor = match (&source.tensor, &source.image) {
                (Some(t), _) => condition(&ckpt, t, cells)?,
                (None, Some(img)) => measure_image(&ckpt.stats, img)?,
                (None, None) => unreachable!("clap enforces a source"),
            };
            let img = synthesis::synthesize(&ckpt, &tensor, seed)?;
            imageio::save_png(img.view(), &ctx.path(&name))?;
        }
        Command::Interp { checkpoint, a, b, t, name } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mixed = synthesis::interpolate_tensors(&condition(&ckpt, &a, None)?, &condition(&ckpt, &b, None)?, t)?;
            storage::save_tensor(&mixed, &ctx.path(&format!("{name}.bin")))?;
            let img = synthesis::synthesize(&ckpt, &mixed, seed)?;
            imageio::save_png(img.view(), &ctx.path(&format!("{name}.png")))?;
        }
        Command::Morph { checkpoint, a, b, frames, t0, t1, gif_delay_ms } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let spec = MorphSpec {
                start: condition(&ckpt, &a, None)?,
                end: condition(&ckpt, &b, None)?,
                ts: synthesis::linear_ramp(frames, t0, t1),
                seed,
            };
            let images = synthesis::morph_sequence(&ckpt, &spec)?;
            synthesis::save_sequence(&images, &ctx.path("frames"), "frame", gif_delay_ms)?;
        }
        Command::Edit { input, bin, factor, cell, name } => {
            let out = ctx.path(&name);
            match storage::load_matrix(&input) {
                Ok(m) if cell.is_none() => storage::save_matrix(&synthesis::edit_bin(&m, bin.0, bin.1, factor)?, &out)?,
                _ => {
                    let t = load_tensor(&input)?;
                    let region = cell.as_deref().map(parse_cell).transpose()?;
                    storage::save_tensor(&synthesis::edit_tensor(&t, region, bin.0, bin.1, factor)?, &out)?;
                }
            }
        }
        Command::Tile { checkpoint, layout, blend, name } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let layout = CoocLayout::load(&layout)?;
            let img = synthesis::synth_large(&ckpt, &layout, seed, blend)?;
            imageio::save_png(img.view(), &ctx.path(&name))?;
        }
        Command::EvalStability { checkpoint, items, iters } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut tensors = items.tensor.iter().map(|p| condition(&ckpt, p, None)).collect::<Result<Vec<_>>>()?;
            if let Some(image) = &items.image {
                let ds = ctx.dataset(image)?;
                tensors.extend(ds.test.iter().take(items.limit).map(|s| s.tensor.clone()));
            }
            let traces = tensors
                .iter()
                .enumerate()
                .map(|(i, t)| evaluation::stability_loop(&ckpt, t, seed::derive_indexed(seed, "stability", i as u64), iters))
                .collect::<cooctex::Result<Vec<_>>>()?;
            let report = evaluation::stability_report(&traces)?;
            evaluation::write_stability_csv(&ctx.path("stability.csv"), &traces, &report)?;
            evaluation::write_summary(&ctx.path("stability.json"), &report)?;
            println!("drift {:.4}", report.drift);
        }
        Command::EvalNovelty { checkpoint, image, samples, top } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = ctx.dataset(&image)?;
            let crops: Vec<_> = ds.train.iter().map(|s| s.pixels.view()).collect();
            let mut report = Vec::new();
            for (i, s) in ds.test.iter().take(samples).enumerate() {
                let img = synthesis::synthesize(&ckpt, &s.tensor, seed::derive_indexed(seed, "novelty", i as u64))?;
                imageio::save_png(img.view(), &ctx.path(&format!("novelty_{i:03}.png")))?;
                let mut entry = json!({ "sample": i });
                for (label, metric) in [("rgb_l1", Metric::RgbL1), ("cooc_l1", Metric::CoocL1(&ckpt.stats))] {
                    let found = evaluation::nearest_neighbors(img.view(), &crops, metric, top)?;
                    if let Some(best) = found.first() {
                        let path = ctx.path(&format!("novelty_{i:03}_{label}_nn.png"));
                        imageio::save_png(crops[best.index], &path)?;
                    }
                    entry[label] = json!(found
                        .iter()
                        .map(|n| json!({ "crop": n.index, "origin": ds.train[n.index].origin, "distance": n.distance }))
                        .collect::<Vec<_>>());
                }
                report.push(entry);
            }
            evaluation::write_summary(&ctx.path("novelty.json"), &report)?;
        }
        Command::Grid { checkpoint, a, b, steps, seeds, name } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (ta, tb) = (condition(&ckpt, &a, None)?, condition(&ckpt, &b, None)?);
            let tensors = synthesis::linear_ramp(steps, 0.0, 1.0)
                .into_iter()
                .map(|t| synthesis::interpolate_tensors(&ta, &tb, t))
                .collect::<cooctex::Result<Vec<_>>>()?;
            let grid = evaluation::diversity_grid(&ckpt, &tensors, &seeds)?;
            imageio::save_png(grid.view(), &ctx.path(&name))?;
        }
        Command::Serve { checkpoint, port, host, queue_depth } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let addr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
            let config = cooctex_service::ServiceConfig {
                queue_depth,
                ..Default::default()
            };
            tokio::runtime::Runtime::new()?.block_on(cooctex_service::serve(ckpt, addr, config))?;
        }
    }
    Ok(())
}
