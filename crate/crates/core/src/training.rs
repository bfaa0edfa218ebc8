//! Adversarial training with a gradient penalty and the co-occurrence
//! consistency term.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::{Array1, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cooc::{cooc_loss, CoocStats, CoocTensor};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{standard_normal, to_batch, Checkpoint, Critic, Generator, TrainingState};
use crate::nn::{accumulate, Adam, Parameters};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_gp: f64,
    pub lambda_cooc: f64,
    pub batch_size: usize,
    pub n_critic: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_gp: 1.0,
            lambda_cooc: 1.0,
            batch_size: 16,
            n_critic: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_gp < 0.0 || self.lambda_cooc < 0.0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("loss weights must be non-negative and the learning rate positive"));
        }
        if self.batch_size == 0 || self.n_critic == 0 {
            return Err(Error::invalid("batch_size and n_critic must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Adam {
        Adam::new(self.learning_rate, self.beta1, self.beta2)
    }
}

#[derive(Debug, Clone)]
pub struct CriticStep {
    /// `E[D(fake)] - E[D(real)] + penalty`.
    pub loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
    /// The interpolated samples the penalty was evaluated on.
    pub interpolates: Array4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorStep {
    pub loss: f64,
    pub adversarial: f64,
    pub cooc: f64,
}

/// Per-sample `u * real + (1 - u) * fake`.
pub fn interpolate_batch(real: &Array4<f64>, fake: &Array4<f64>, u: &[f64]) -> Result<Array4<f64>> {
    if real.dim() != fake.dim() || u.len() != real.dim().0 {
        return Err(Error::shape(format!("{:?}", real.dim()), format!("{:?}", fake.dim())));
    }
    let mut out = fake.clone();
    for (i, &ui) in u.iter().enumerate() {
        let mut o = out.index_axis_mut(Axis(0), i);
        o.zip_mut_with(&real.index_axis(Axis(0), i), |f, &r| *f = ui * r + (1.0 - ui) * *f);
    }
    Ok(out)
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

/// One critic update on a batch of real crops and their normalised
/// conditions. The generator runs with batch statistics but its running
/// statistics are not updated.
pub fn discriminator_step(
    generator: &Generator,
    critic: &mut Critic,
    opt: &mut Adam,
    real: &Array4<f64>,
    cond: &Array4<f64>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<CriticStep> {
    let (n, _, h, w) = cond.dim();
    let z = standard_normal((n, generator.config().noise_channels, h, w), rng);
    let fake = generator.forward_train(&z, cond)?.output;
    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let interpolates = interpolate_batch(real, &fake, &u)?;

    let fake_trace = critic.forward(&fake, cond)?;
    let real_trace = critic.forward(real, cond)?;
    let wasserstein = fake_trace.scores.mean().unwrap_or(0.0) - real_trace.scores.mean().unwrap_or(0.0);
    let inv = 1.0 / n as f64;
    let (mut grads, _) = critic.backward(&fake_trace, &Array1::from_elem(n, inv), &[])?;
    let (real_grads, _) = critic.backward(&real_trace, &Array1::from_elem(n, -inv), &[])?;
    accumulate(&mut grads, &real_grads);
    let penalty = if cfg.lambda_gp > 0.0 {
        let gp = critic.gradient_penalty(&interpolates, cond, cfg.lambda_gp)?;
        accumulate(&mut grads, &gp.grads);
        gp.value
    } else {
        0.0
    };
    let loss = finite("critic loss", wasserstein + penalty)?;
    if !crate::nn::all_finite(&grads) {
        return Err(Error::NonFinite("critic gradient".into()));
    }
    opt.update(critic.parameters_mut(), &grads);
    Ok(CriticStep {
        loss,
        wasserstein,
        penalty,
        interpolates,
    })
}

/// One generator update: adversarial term plus `lambda_cooc` times the mean
/// per-sample co-occurrence loss against the raw condition tensors.
pub fn generator_step(
    generator: &mut Generator,
    critic: &Critic,
    opt: &mut Adam,
    cond: &Array4<f64>,
    targets: &[&CoocTensor],
    stats: &CoocStats,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<GeneratorStep> {
    let (n, _, h, w) = cond.dim();
    if targets.len() != n {
        return Err(Error::shape(n, targets.len()));
    }
    let z = standard_normal((n, generator.config().noise_channels, h, w), rng);
    let trace = generator.forward_train(&z, cond)?;
    let fake = &trace.output;
    let d_trace = critic.forward(fake, cond)?;
    let adversarial = -d_trace.scores.mean().unwrap_or(0.0);
    let (_, mut d_fake) = critic.backward(&d_trace, &Array1::from_elem(n, -1.0 / n as f64), &[])?;

    let mut cooc = 0.0;
    if cfg.lambda_cooc > 0.0 {
        let scale = cfg.lambda_cooc / n as f64;
        for (i, target) in targets.iter().enumerate() {
            let img = fake.index_axis(Axis(0), i).permuted_axes([1, 2, 0]);
            let l = cooc_loss(img, target, &stats.palette, &stats.params)?;
            cooc += l.value / n as f64;
            let mut d = d_fake.index_axis_mut(Axis(0), i);
            d.zip_mut_with(&l.grad.view().permuted_axes([2, 0, 1]), |a, &b| *a += scale * b);
        }
    }
    let loss = finite("generator loss", adversarial + cfg.lambda_cooc * cooc)?;
    let grads = generator.backward(&trace, &d_fake)?;
    if !crate::nn::all_finite(&grads) {
        return Err(Error::NonFinite("generator gradient".into()));
    }
    opt.update(generator.parameters_mut(), &grads);
    generator.update_running_stats(&trace);
    Ok(GeneratorStep {
        loss,
        adversarial,
        cooc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub critic_loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
    pub adversarial: f64,
    pub cooc: f64,
    pub generator_loss: f64,
    pub wall_seconds: f64,
}

/// Append-only per-step training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// Appends rows to `path`, writing the header only for a new file.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(Self {
            rows: r.deserialize().collect::<std::result::Result<_, _>>()?,
        })
    }

    pub fn epoch_mean(&self, epoch: usize, f: impl Fn(&LogRow) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.epoch == epoch).map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Fresh models for a dataset's statistics.
pub fn init_checkpoint(stats: CoocStats, run: &crate::config::RunConfig) -> Result<Checkpoint> {
    run.validate()?;
    if stats.palette.k() != run.k || stats.downsample != run.downsample {
        return Err(Error::invalid("statistics do not match the run configuration"));
    }
    let ckpt = Checkpoint {
        generator: Generator::new(run.generator_config(), seed::derive(run.seed, "generator"))?,
        critic: Critic::new(run.critic_config(), seed::derive(run.seed, "critic"))?,
        stats,
        training: None,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where `checkpoint.ckpt` and `train_log.csv` are written after every
    /// epoch.
    pub out_dir: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const SNAPSHOT_FILE: &str = "nonfinite_snapshot.ckpt";

/// Trains until `cfg.epochs` epochs are done, resuming from the training
/// state stored in `ckpt` if there is one. `on_epoch` runs after every
/// completed epoch with the updated checkpoint.
pub fn train(
    mut ckpt: Checkpoint,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(usize, &Checkpoint, &TrainLog),
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    ckpt.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::invalid("dataset has no training crops"));
    }
    if dataset.stats.palette != ckpt.stats.palette || dataset.stats.params != ckpt.stats.params {
        return Err(Error::invalid("checkpoint statistics differ from the dataset's"));
    }
    let config_text = serde_json::to_string(cfg)?;
    let (start, mut g_opt, mut d_opt) = match ckpt.training.take() {
        Some(t) => (t.epochs_done, t.generator_opt, t.critic_opt),
        None => (0, cfg.optimizer(), cfg.optimizer()),
    };
    let mut log = TrainLog::default();
    let clock = Instant::now();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    ckpt.training = Some(TrainingState {
        epochs_done: start,
        generator_opt: g_opt.clone(),
        critic_opt: d_opt.clone(),
        config: config_text.clone(),
    });
    for epoch in start..cfg.epochs {
        let mut rng = seed::rng_indexed(seed, "train", epoch as u64);
        let mut epoch_log = TrainLog::default();
        for (step, batch) in dataset.batches(epoch, cfg.batch_size).iter().enumerate() {
            let samples: Vec<_> = batch.iter().map(|&i| &dataset.train[i]).collect();
            let real = to_batch(samples.iter().map(|s| s.pixels.view()))?;
            let cond = to_batch(samples.iter().map(|s| s.normalized.view()))?;
            let targets: Vec<&CoocTensor> = samples.iter().map(|s| &s.tensor).collect();
            let result = (|| -> Result<(CriticStep, GeneratorStep)> {
                let mut d = None;
                for _ in 0..cfg.n_critic {
                    d = Some(discriminator_step(&ckpt.generator, &mut ckpt.critic, &mut d_opt, &real, &cond, cfg, &mut rng)?);
                }
                let g = generator_step(
                    &mut ckpt.generator,
                    &ckpt.critic,
                    &mut g_opt,
                    &cond,
                    &targets,
                    &ckpt.stats,
                    cfg,
                    &mut rng,
                )?;
                Ok((d.expect("n_critic >= 1"), g))
            })();
            let (d, g) = match result {
                Ok(v) => v,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = &opts.out_dir {
                        let path = dir.join(SNAPSHOT_FILE);
                        warn!("non-finite loss at epoch {epoch} step {step}; snapshot in {}", path.display());
                        ckpt.save(&path)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            epoch_log.rows.push(LogRow {
                epoch,
                step,
                critic_loss: d.loss,
                wasserstein: d.wasserstein,
                penalty: d.penalty,
                adversarial: g.adversarial,
                cooc: g.cooc,
                generator_loss: g.loss,
                wall_seconds: clock.elapsed().as_secs_f64(),
            });
        }
        ckpt.training = Some(TrainingState {
            epochs_done: epoch + 1,
            generator_opt: g_opt.clone(),
            critic_opt: d_opt.clone(),
            config: config_text.clone(),
        });
        info!(
            "epoch {epoch}: critic {:.4} cooc {:.4}",
            epoch_log.epoch_mean(epoch, |r| r.critic_loss).unwrap_or(f64::NAN),
            epoch_log.epoch_mean(epoch, |r| r.cooc).unwrap_or(f64::NAN)
        );
        if let Some(dir) = &opts.out_dir {
            ckpt.save(&dir.join(CHECKPOINT_FILE))?;
            epoch_log.append_csv(&dir.join(LOG_FILE))?;
        }
        log.rows.extend(epoch_log.rows);
        on_epoch(epoch, &ckpt, &log);
    }
    Ok((ckpt, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::dataset::{build_from_image, Dataset};
    use crate::{imageio, procedural};

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::desk();
        run.cooc = crate::cooc::CoocParams::new(9, 5, 4.0).unwrap();
        run.downsample = 8;
        run.crop_size = 16;
        run.crops = 12;
        run.train_fraction = 0.75;
        run.noise_channels = 2;
        run.generator_widths = vec![4, 4, 3];
        run.critic_widths = vec![3, 4, 1];
        run.kernel = 3;
        run.critic_inject_after = 2;
        run.train.batch_size = 4;
        run.train.epochs = 2;
        run.seed = 5;
        run
    }

    fn tiny_dataset(run: &RunConfig) -> Dataset {
        let img = imageio::to_rgb8(procedural::blobs(32, 40, 1).view());
        build_from_image(&img, "blobs", &run.dataset_config()).unwrap()
    }

    fn batch(ds: &Dataset) -> (Array4<f64>, Array4<f64>, Vec<&CoocTensor>) {
        let s = &ds.train[..4];
        (
            to_batch(s.iter().map(|s| s.pixels.view())).unwrap(),
            to_batch(s.iter().map(|s| s.normalized.view())).unwrap(),
            s.iter().map(|s| &s.tensor).collect(),
        )
    }

    #[test]
    fn interpolation_endpoints() {
        let mut rng = seed::rng(0, "t");
        let a = standard_normal((2, 3, 4, 4), &mut rng);
        let b = standard_normal((2, 3, 4, 4), &mut rng);
        let x = interpolate_batch(&a, &b, &[1.0, 0.0]).unwrap();
        assert_eq!(x.index_axis(Axis(0), 0), a.index_axis(Axis(0), 0));
        assert_eq!(x.index_axis(Axis(0), 1), b.index_axis(Axis(0), 1));
    }

    #[test]
    fn critic_step_only_touches_the_critic() {
        let run = tiny_run();
        let ds = tiny_dataset(&run);
        let ckpt = init_checkpoint(ds.stats.clone(), &run).unwrap();
        let (real, cond, _) = batch(&ds);
        let mut critic = ckpt.critic.clone();
        let mut opt = run.train.optimizer();
        let mut rng = seed::rng(1, "t");
        let step = discriminator_step(&ckpt.generator, &mut critic, &mut opt, &real, &cond, &run.train, &mut rng).unwrap();
        assert_ne!(critic, ckpt.critic);
        assert!(step.penalty >= 0.0);
        assert!((step.loss - step.wasserstein - step.penalty).abs() < 1e-12);
        // the penalty equals a recomputation on the stored interpolates
        let gp = ckpt.critic.gradient_penalty(&step.interpolates, &cond, run.train.lambda_gp).unwrap();
        assert!((gp.value - step.penalty).abs() < 1e-5);
    }

    #[test]
    fn zero_penalty_weight_leaves_the_wasserstein_term() {
        let mut run = tiny_run();
        run.train.lambda_gp = 0.0;
        let ds = tiny_dataset(&run);
        let ckpt = init_checkpoint(ds.stats.clone(), &run).unwrap();
        let (real, cond, _) = batch(&ds);
        let mut critic = ckpt.critic.clone();
        let mut opt = run.train.optimizer();
        let step = discriminator_step(&ckpt.generator, &mut critic, &mut opt, &real, &cond, &run.train, &mut seed::rng(2, "t")).unwrap();
        assert_eq!(step.penalty, 0.0);
        assert_eq!(step.loss, step.wasserstein);
    }

    #[test]
    fn generator_step_only_touches_the_generator() {
        let run = tiny_run();
        let ds = tiny_dataset(&run);
        let ckpt = init_checkpoint(ds.stats.clone(), &run).unwrap();
        let (_, cond, targets) = batch(&ds);
        let mut g = ckpt.generator.clone();
        let mut opt = run.train.optimizer();
        let step = generator_step(&mut g, &ckpt.critic, &mut opt, &cond, &targets, &ds.stats, &run.train, &mut seed::rng(3, "t")).unwrap();
        assert_ne!(g, ckpt.generator);
        assert!(step.cooc >= 0.0);
        assert!((step.loss - (step.adversarial + run.train.lambda_cooc * step.cooc)).abs() < 1e-6);

        let mut pure = run.train.clone();
        pure.lambda_cooc = 0.0;
        let mut g2 = ckpt.generator.clone();
        let step = generator_step(&mut g2, &ckpt.critic, &mut run.train.optimizer(), &cond, &targets, &ds.stats, &pure, &mut seed::rng(3, "t")).unwrap();
        assert_eq!(step.loss, step.adversarial);
    }

    #[test]
    fn zero_epochs_returns_initial_models() {
        let mut run = tiny_run();
        run.train.epochs = 0;
        let ds = tiny_dataset(&run);
        let ckpt = init_checkpoint(ds.stats.clone(), &run).unwrap();
        let (out, log) = train(ckpt.clone(), &ds, &run.train, run.seed, &TrainOptions::default(), |_, _, _| {}).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(out.generator, ckpt.generator);
        assert_eq!(out.critic, ckpt.critic);
    }

    #[test]
    fn training_is_reproducible_and_resumable() {
        let run = tiny_run();
        let ds = tiny_dataset(&run);
        let init = init_checkpoint(ds.stats.clone(), &run).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
        };
        let (full, log) = train(init.clone(), &ds, &run.train, run.seed, &opts, |_, _, _| {}).unwrap();
        assert_eq!(log.rows.len(), 2 * ds.batches(0, 4).len());
        let (again, log2) = train(init.clone(), &ds, &run.train, run.seed, &TrainOptions::default(), |_, _, _| {}).unwrap();
        assert_eq!(again, full);
        let strip = |l: &TrainLog| l.rows.iter().map(|r| (r.critic_loss, r.generator_loss)).collect::<Vec<_>>();
        assert_eq!(strip(&log), strip(&log2));

        // stop after one epoch, reload, finish
        let mut one = run.train.clone();
        one.epochs = 1;
        let (half, _) = train(init, &ds, &one, run.seed, &TrainOptions::default(), |_, _, _| {}).unwrap();
        let path = dir.path().join("half.ckpt");
        half.save(&path).unwrap();
        let (resumed, _) = train(Checkpoint::load(&path).unwrap(), &ds, &run.train, run.seed, &TrainOptions::default(), |_, _, _| {}).unwrap();
        assert_eq!(resumed, full);

        let on_disk = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(on_disk, full);
        assert_eq!(TrainLog::read_csv(&dir.path().join(LOG_FILE)).unwrap().rows.len(), log.rows.len());
    }
}
