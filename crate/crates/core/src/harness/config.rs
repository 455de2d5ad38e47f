//! Experiment configuration.
//!
//! A config file is flat `section.key = value` text; `#` starts a comment.
//! Every key has a default and can be overridden from the command line with
//! `--set section.key=value`. Unknown keys are rejected. A value of `auto`
//! picks a default that depends on other keys (see [`ExperimentConfig::resolve`]).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::metalearn::{uniform, GammaSource, MetaConfig, OuterOptimizer, Variant};
use crate::networks::{Arch, HighEndSpec, InitScheme, InputKind, LowEndSpec};
use crate::tasks::{BlobsSpec, FamilyKind, GlyphsSpec, TaskFamily};
use crate::{Error, Result};

/// Environment variable that overrides `run.out`.
pub const OUT_ENV: &str = "METACRITIC_OUT";

const DEFAULTS: &[(&str, &str)] = &[
    ("run.name", "experiment"),
    ("run.seeds", "0,1,2"),
    ("run.parallel", "false"),
    ("run.out", "runs"),
    ("task.family", "gaussian_blobs"),
    ("task.seed", "0"),
    ("task.path", ""),
    ("task.dim", "16"),
    ("task.spread", "1.0"),
    ("task.noise", "0.5"),
    ("task.train_classes", "40"),
    ("task.val_classes", "12"),
    ("task.test_classes", "12"),
    ("task.samples_per_class", "40"),
    ("task.strokes", "3"),
    ("task.jitter", "1"),
    ("task.flip_prob", "0.02"),
    ("episode.way", "5"),
    ("episode.shot", "1"),
    ("episode.query", "15"),
    ("train.epochs", "30"),
    ("train.steps_per_epoch", "50"),
    ("train.val_episodes", "50"),
    ("train.test_episodes", "200"),
    ("train.patience", "10"),
    ("meta.variant", "maml_pp"),
    ("meta.inner_steps", "5"),
    ("meta.target_steps", "1"),
    ("meta.meta_batch", "auto"),
    ("meta.outer_optimizer", "auto"),
    ("meta.outer_lr", "auto"),
    ("meta.gamma", "learned"),
    ("meta.lslr_init", "0.01"),
    ("meta.critic_outer_step", "1e-6"),
    ("meta.critic_kernels", "8"),
    ("meta.v", "uniform"),
    ("meta.w", "uniform"),
    ("meta.anneal_end_epoch", "15"),
    ("meta.first_order_epochs", "0"),
    ("meta.multi_step", "false"),
    ("model.kind", "lowend"),
    ("model.init", "auto"),
    ("model.blocks", "3"),
    ("model.width", "8"),
    ("model.growth_rate", "8"),
    ("model.stem_channels", "auto"),
    ("model.units_per_stage", "2"),
    ("model.num_stages", "2"),
    ("model.compression", "0.5"),
    ("model.se_reduction", "16"),
    ("model.bottleneck_factor", "4"),
];

/// Raw key/value settings, always holding every known key.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Unknown {
                kind: "config key",
                value: key.to_string(),
            }),
        }
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn parse_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |detail: String| Error::Format {
                path: origin.to_string(),
                detail: format!("line {}: {detail}", i + 1),
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v).map_err(|e| fail(e.to_string()))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
    }

    fn auto<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.get(key) == "auto" {
            Ok(default)
        } else {
            self.parse(key)
        }
    }

    fn weights(&self, key: &str, len: usize) -> Result<Vec<f64>> {
        let v = self.get(key);
        if v == "uniform" {
            return Ok(uniform(len));
        }
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("`{key}` entry `{p}` is not a number")))
            })
            .collect()
    }
}

/// Fully resolved experiment description.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub settings: Settings,
    pub name: String,
    pub seeds: Vec<u64>,
    pub parallel: bool,
    pub out_dir: PathBuf,
    pub family: FamilyKind,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    pub patience: usize,
    pub meta: MetaConfig,
    pub init: InitScheme,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Settings::default();
        s.parse_text(&text, &path.display().to_string())?;
        for o in overrides {
            s.apply_override(o)?;
        }
        Self::resolve(s)
    }

    /// Type-check the settings and fill in `auto` values: the meta-batch
    /// follows the shot count, the high-end model defaults to plain SGD at
    /// 1e-4 with `xavier_except_last`, the low-end model to Adam at 1e-3
    /// with fan-in uniform initialization.
    pub fn resolve(settings: Settings) -> Result<Self> {
        let s = &settings;
        let seeds = s
            .get("run.seeds")
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("seed `{p}` is not an unsigned integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        if seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        let out_dir = match std::env::var(OUT_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(s.get("run.out")),
        };
        let highend = match s.get("model.kind") {
            "lowend" => false,
            "highend" => true,
            other => {
                return Err(Error::Unknown {
                    kind: "model kind",
                    value: other.to_string(),
                })
            }
        };
        let shot: usize = s.parse("episode.shot")?;
        let n: usize = s.parse("meta.inner_steps")?;
        let i: usize = s.parse("meta.target_steps")?;
        let optimizer = s.auto(
            "meta.outer_optimizer",
            if highend { OuterOptimizer::Sgd } else { OuterOptimizer::Adam },
        )?;
        let meta = MetaConfig {
            inner_steps: n,
            target_steps: i,
            meta_batch: s.auto("meta.meta_batch", MetaConfig::default_meta_batch(shot))?,
            outer_lr: s.auto(
                "meta.outer_lr",
                if optimizer == OuterOptimizer::Sgd { 1e-4 } else { 1e-3 },
            )?,
            outer_optimizer: optimizer,
            gamma: s.parse::<GammaSource>("meta.gamma")?,
            lslr_init: s.parse("meta.lslr_init")?,
            critic_outer_step: s.parse("meta.critic_outer_step")?,
            v: s.weights("meta.v", n)?,
            w: s.weights("meta.w", i)?,
            anneal_end_epoch: s.parse("meta.anneal_end_epoch")?,
            first_order_epochs: s.parse("meta.first_order_epochs")?,
            variant: s.parse::<Variant>("meta.variant")?,
            multi_step: s.parse("meta.multi_step")?,
            critic_kernels: s.parse("meta.critic_kernels")?,
        };
        meta.validate()?;
        let cfg = Self {
            name: s.get("run.name").to_string(),
            seeds,
            parallel: s.parse("run.parallel")?,
            out_dir,
            family: s.parse("task.family")?,
            way: s.parse("episode.way")?,
            shot,
            query: s.parse("episode.query")?,
            epochs: s.parse("train.epochs")?,
            steps_per_epoch: s.parse("train.steps_per_epoch")?,
            val_episodes: s.parse("train.val_episodes")?,
            test_episodes: s.parse("train.test_episodes")?,
            patience: s.parse("train.patience")?,
            meta,
            init: s.auto(
                "model.init",
                if highend {
                    InitScheme::XavierExceptLast
                } else {
                    InitScheme::FaninUniform
                },
            )?,
            settings,
        };
        if cfg.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if cfg.epochs == 0 || cfg.steps_per_epoch == 0 || cfg.val_episodes == 0 || cfg.test_episodes == 0 {
            return Err(Error::Config("epochs, steps per epoch and episode counts must be positive".into()));
        }
        if cfg.name.is_empty() || cfg.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run.name `{}` is not a plain file name", cfg.name)));
        }
        Ok(cfg)
    }

    pub fn family_seed(&self) -> Result<u64> {
        self.settings.parse("task.seed")
    }

    pub fn build_family(&self) -> Result<TaskFamily> {
        let s = &self.settings;
        let seed = self.family_seed()?;
        match self.family {
            FamilyKind::GaussianBlobs => BlobsSpec {
                dim: s.parse("task.dim")?,
                train_classes: s.parse("task.train_classes")?,
                val_classes: s.parse("task.val_classes")?,
                test_classes: s.parse("task.test_classes")?,
                samples_per_class: s.parse("task.samples_per_class")?,
                spread: s.parse("task.spread")?,
                noise: s.parse("task.noise")?,
            }
            .build(seed),
            FamilyKind::PatternGlyphs => GlyphsSpec {
                train_classes: s.parse("task.train_classes")?,
                val_classes: s.parse("task.val_classes")?,
                test_classes: s.parse("task.test_classes")?,
                samples_per_class: s.parse("task.samples_per_class")?,
                strokes_per_class: s.parse("task.strokes")?,
                jitter: s.parse("task.jitter")?,
                flip_prob: s.parse("task.flip_prob")?,
            }
            .build(seed),
            FamilyKind::FileCorpus => {
                let path = s.get("task.path");
                if path.is_empty() {
                    return Err(Error::Config("task.family = file_corpus needs task.path".into()));
                }
                TaskFamily::load_episode_file(Path::new(path))
            }
        }
    }

    /// Base model for samples of `sample_shape` and `way` output classes.
    pub fn build_arch(&self, sample_shape: &[usize]) -> Result<Arch> {
        let s = &self.settings;
        let arch = match s.get("model.kind") {
            "highend" => {
                let [c, h, w] = sample_shape[..] else {
                    return Err(Error::Config(format!(
                        "the high-end model needs image samples, family yields {sample_shape:?}"
                    )));
                };
                let k: usize = s.parse("model.growth_rate")?;
                Arch::HighEnd(HighEndSpec {
                    in_channels: c,
                    height: h,
                    width: w,
                    num_classes: self.way,
                    stem_channels: s.auto("model.stem_channels", 2 * k)?,
                    growth_rate: k,
                    units_per_stage: s.parse("model.units_per_stage")?,
                    num_stages: s.parse("model.num_stages")?,
                    compression: s.parse("model.compression")?,
                    se_reduction: s.parse("model.se_reduction")?,
                    bottleneck_factor: s.parse("model.bottleneck_factor")?,
                })
            }
            _ => {
                let input = match sample_shape[..] {
                    [dim] => InputKind::Vector { dim },
                    [channels, height, width] => InputKind::Image { channels, height, width },
                    _ => {
                        return Err(Error::Config(format!("unsupported sample shape {sample_shape:?}")));
                    }
                };
                Arch::LowEnd(LowEndSpec {
                    input,
                    num_classes: self.way,
                    blocks: s.parse("model.blocks")?,
                    width: s.parse("model.width")?,
                })
            }
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }
}
