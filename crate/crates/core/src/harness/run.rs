use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::metalearn::MetaLearner;
use crate::networks::checkpoint::Checkpoint;
use crate::tasks::{Split, TaskFamily};
use crate::{rng, Error, Result};

use super::config::ExperimentConfig;
use super::stats::{ci95, mean, sample_std, EarlyStopper};

/// Outcome of training and testing one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_accuracy: f64,
    /// 1-based epoch with the best validation accuracy.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_accuracy: Vec<f64>,
    /// Per-episode 95% interval around `test_accuracy`; not the headline statistic.
    pub per_episode_ci95: Option<f64>,
    /// Smallest critic-gradient norm seen over all meta-steps.
    pub min_critic_grad_norm: f64,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub variant: String,
    pub model: String,
    pub family: String,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Over per-seed test accuracies; absent with a single seed.
    pub ci95: Option<f64>,
    pub wall_seconds: f64,
    pub wall_mean_seconds: f64,
    pub wall_std_seconds: f64,
    pub seeds: Vec<SeedResult>,
}

/// Index of the `b`-th training episode of meta-step `step` in epoch `epoch`.
fn train_episode_index(seed: u64, epoch: usize, step: usize, b: usize, cfg: &ExperimentConfig) -> u64 {
    let counter = ((epoch * cfg.steps_per_epoch + step) * cfg.meta.meta_batch + b) as u64;
    rng::derive_seed(seed, "train-episode", counter)
}

/// Reject configurations that cannot run before any training starts.
fn preflight(cfg: &ExperimentConfig, family: &TaskFamily) -> Result<()> {
    for split in [Split::Train, Split::Val, Split::Test] {
        family.check_episode_shape(split, cfg.way, cfg.shot, cfg.query)?;
    }
    cfg.build_arch(&family.sample_shape)?;
    Ok(())
}

pub fn mean_accuracy(learner: &MetaLearner, family: &TaskFamily, split: Split, count: usize, cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    (0..count as u64)
        .map(|i| {
            let ep = family.sample_episode(split, i, cfg.way, cfg.shot, cfg.query)?;
            Ok(learner.evaluate(&ep)?.accuracy)
        })
        .collect()
}

/// Train, early-stop on validation accuracy, and test the best checkpoint
/// for one seed. The checkpoint goes under `dir` when given.
pub fn run_seed(cfg: &ExperimentConfig, family: &TaskFamily, seed: u64, dir: Option<&Path>) -> Result<SeedResult> {
    let started = Instant::now();
    let arch = cfg.build_arch(&family.sample_shape)?;
    let mut learner = MetaLearner::new(arch, cfg.meta.clone(), cfg.init, cfg.way * cfg.query, seed)?;
    let mut stopper = EarlyStopper::new(cfg.patience)?;
    let mut best: Option<Checkpoint> = None;
    let mut val_accuracy = Vec::new();
    let mut min_critic = f64::INFINITY;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        for step in 0..cfg.steps_per_epoch {
            let batch = (0..cfg.meta.meta_batch)
                .map(|b| {
                    let index = train_episode_index(seed, epoch, step, b, cfg);
                    family.sample_episode(Split::Train, index, cfg.way, cfg.shot, cfg.query)
                })
                .collect::<Result<Vec<_>>>()?;
            let m = learner.meta_step(&batch, epoch)?;
            min_critic = min_critic.min(m.critic_grad_norm);
        }
        epochs_run = epoch + 1;
        let val = mean(&mean_accuracy(&learner, family, Split::Val, cfg.val_episodes, cfg)?);
        val_accuracy.push(val);
        if stopper.observe(epochs_run, val) {
            let meta = BTreeMap::from([
                ("seed".to_string(), seed.to_string()),
                ("epoch".to_string(), epochs_run.to_string()),
                ("variant".to_string(), cfg.meta.variant.to_string()),
            ]);
            best = Some(learner.to_checkpoint(meta));
        }
        if stopper.should_stop(epochs_run) {
            break;
        }
    }
    let best = best.ok_or_else(|| Error::Config("no epoch completed".into()))?;
    let checkpoint = match dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("seed{seed}-best.ckpt"));
            best.save(&path)?;
            learner.load_checkpoint(&Checkpoint::load(&path)?)?;
            Some(path)
        }
        None => {
            learner.load_checkpoint(&best)?;
            None
        }
    };
    let test = mean_accuracy(&learner, family, Split::Test, cfg.test_episodes, cfg)?;
    Ok(SeedResult {
        seed,
        test_accuracy: mean(&test),
        best_epoch: stopper.best_epoch().unwrap_or(0),
        epochs_run,
        val_accuracy,
        per_episode_ci95: ci95(&test).ok(),
        min_critic_grad_norm: if min_critic.is_finite() { min_critic } else { 0.0 },
        wall_seconds: started.elapsed().as_secs_f64(),
        checkpoint,
    })
}

pub fn aggregate(cfg: &ExperimentConfig, family: &TaskFamily, seeds: Vec<SeedResult>) -> RunResult {
    let accuracies: Vec<f64> = seeds.iter().map(|s| s.test_accuracy).collect();
    let walls: Vec<f64> = seeds.iter().map(|s| s.wall_seconds).collect();
    RunResult {
        name: cfg.name.clone(),
        variant: cfg.meta.variant.to_string(),
        model: cfg.settings.get("model.kind").to_string(),
        family: family.origin.clone(),
        way: cfg.way,
        shot: cfg.shot,
        query: cfg.query,
        mean: mean(&accuracies),
        ci95: ci95(&accuracies).ok(),
        accuracies,
        wall_seconds: walls.iter().sum(),
        wall_mean_seconds: mean(&walls),
        wall_std_seconds: sample_std(&walls),
        seeds,
    }
}

/// Run every configured seed, write checkpoints and `result.json` under
/// the run directory, and return the aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let family = cfg.build_family()?;
    preflight(cfg, &family)?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir)?;
    let seeds = if cfg.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    let (family, dir) = (&family, &dir);
                    scope.spawn(move || run_seed(cfg, family, seed, Some(dir)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("seed worker panicked".into()))))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        cfg.seeds
            .iter()
            .map(|&seed| run_seed(cfg, &family, seed, Some(&dir)))
            .collect::<Result<Vec<_>>>()?
    };
    let result = aggregate(cfg, &family, seeds);
    let record = super::report::emit_report(std::slice::from_ref(&result), super::report::ReportFormat::Json)?;
    std::fs::write(dir.join("result.json"), record)?;
    let csv = super::report::emit_report(std::slice::from_ref(&result), super::report::ReportFormat::Csv)?;
    std::fs::write(dir.join("result.csv"), csv)?;
    Ok(result)
}
