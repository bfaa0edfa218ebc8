use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{assign_parameters, Critic, CriticConfig, Generator, GeneratorConfig};
use crate::container::Container;
use crate::cooc::CoocStats;
use crate::error::{Error, Result};
use crate::nn::{Adam, Grads, Parameters};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"COOCCKPT";
const VERSION: u32 = 1;

/// Optimiser state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub epochs_done: usize,
    pub generator_opt: Adam,
    pub critic_opt: Adam,
    /// Resolved training configuration as key-value text.
    pub config: String,
}

/// Model parameters, statistics and (optionally) training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub generator: Generator,
    pub critic: Critic,
    pub stats: CoocStats,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    tensors: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainingHeader {
    epochs_done: usize,
    config: String,
    generator_opt: AdamHeader,
    critic_opt: AdamHeader,
}

#[derive(Serialize, Deserialize)]
struct Header {
    generator: GeneratorConfig,
    critic: CriticConfig,
    training: Option<TrainingHeader>,
}

fn push_list(c: &mut Container, prefix: &str, values: &[&[f64]]) {
    for (i, v) in values.iter().enumerate() {
        c.push_f64(format!("{prefix}.{i}"), &[v.len()], v.to_vec());
    }
}

fn read_list(c: &Container, prefix: &str, count: usize) -> Result<Grads> {
    (0..count).map(|i| Ok(c.f64(&format!("{prefix}.{i}"))?.1.to_vec())).collect()
}

fn adam_header(a: &Adam) -> AdamHeader {
    AdamHeader {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        step: a.step,
        tensors: a.m.len(),
    }
}

fn push_adam(c: &mut Container, prefix: &str, a: &Adam) {
    let m: Vec<&[f64]> = a.m.iter().map(|v| v.as_slice()).collect();
    let v: Vec<&[f64]> = a.v.iter().map(|v| v.as_slice()).collect();
    push_list(c, &format!("{prefix}.m"), &m);
    push_list(c, &format!("{prefix}.v"), &v);
}

fn read_adam(c: &Container, prefix: &str, h: &AdamHeader) -> Result<Adam> {
    Ok(Adam {
        lr: h.lr,
        beta1: h.beta1,
        beta2: h.beta2,
        eps: h.eps,
        step: h.step,
        m: read_list(c, &format!("{prefix}.m"), h.tensors)?,
        v: read_list(c, &format!("{prefix}.v"), h.tensors)?,
    })
}

impl Checkpoint {
    /// Checks that the models and statistics agree with each other.
    pub fn validate(&self) -> Result<()> {
        let k2 = self.stats.palette.k().pow(2);
        let g = self.generator.config();
        let d = self.critic.config();
        if g.cond_channels != k2 || d.cond_channels != k2 {
            return Err(Error::invalid(format!(
                "models expect {}/{} condition channels but the palette has k² = {k2}",
                g.cond_channels, d.cond_channels
            )));
        }
        if g.upsampling() != self.stats.downsample || d.downsampling() != self.stats.downsample {
            return Err(Error::invalid(format!(
                "models scale by {}/{} but statistics are downsampled by {}",
                g.upsampling(),
                d.downsampling(),
                self.stats.downsample
            )));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let header = Header {
            generator: self.generator.config().clone(),
            critic: self.critic.config().clone(),
            training: self.training.as_ref().map(|t| TrainingHeader {
                epochs_done: t.epochs_done,
                config: t.config.clone(),
                generator_opt: adam_header(&t.generator_opt),
                critic_opt: adam_header(&t.critic_opt),
            }),
        };
        let mut c = Container::new(CHECKPOINT_MAGIC, VERSION);
        c.push_text("header", serde_json::to_string_pretty(&header).expect("serializable header"));
        self.stats.write_into(&mut c, "stats.");
        push_list(&mut c, "g.param", &self.generator.parameters());
        push_list(&mut c, "g.buffer", &self.generator.buffers());
        push_list(&mut c, "d.param", &self.critic.parameters());
        if let Some(t) = &self.training {
            push_adam(&mut c, "g.adam", &t.generator_opt);
            push_adam(&mut c, "d.adam", &t.critic_opt);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let header: Header = serde_json::from_str(c.text("header")?)?;
        let stats = CoocStats::read_from(c, "stats.")?;
        let mut generator = Generator::new(header.generator, 0)?;
        let mut critic = Critic::new(header.critic, 0)?;
        let n = generator.parameters().len();
        assign_parameters(generator.parameters_mut(), &read_list(c, "g.param", n)?, "generator parameters")?;
        let n = generator.buffers().len();
        assign_parameters(generator.buffers_mut(), &read_list(c, "g.buffer", n)?, "generator buffers")?;
        let n = critic.parameters().len();
        assign_parameters(critic.parameters_mut(), &read_list(c, "d.param", n)?, "critic parameters")?;
        let training = match header.training {
            Some(t) => Some(TrainingState {
                epochs_done: t.epochs_done,
                generator_opt: read_adam(c, "g.adam", &t.generator_opt)?,
                critic_opt: read_adam(c, "d.adam", &t.critic_opt)?,
                config: t.config,
            }),
            None => None,
        };
        let ckpt = Self {
            generator,
            critic,
            stats,
            training,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, CHECKPOINT_MAGIC, VERSION)?)
    }

    /// Copy without optimiser state, for inference.
    pub fn inference_only(&self) -> Self {
        Self {
            training: None,
            ..self.clone()
        }
    }
}
