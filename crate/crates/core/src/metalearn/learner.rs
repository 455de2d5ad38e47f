use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::functional::accuracy;
use crate::autodiff::{grad, Tensor};
use crate::networks::checkpoint::Checkpoint;
use crate::networks::{Arch, CriticSpec, InitScheme, RunningStats, DEFAULT_NORM_MOMENTUM};
use crate::params::ParamSet;
use crate::tasks::Episode;
use crate::{rng, Error, Result};

use super::inner::{critic_adapt, inner_adapt, outer_loss_sca, BaseModel, InnerTrajectory, LslrTable};
use super::optim::{sgd, Adam, OuterOptimizer};
use super::{anneal_importance_weights, first_order_mode, FeatureVariant, GammaSource, MetaConfig};

/// Result of adapting to one episode.
#[derive(Clone, Debug, Serialize)]
pub struct EpisodeOutcome {
    /// This episode's contribution to the outer loss (training) or the
    /// target loss at the final fast weights (evaluation).
    pub loss: f64,
    /// Target accuracy at the final fast weights.
    pub accuracy: f64,
    pub support_losses: Vec<f64>,
    pub critic_values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub episodes: Vec<EpisodeOutcome>,
    pub theta_grad_norm: f64,
    pub lslr_grad_norm: f64,
    pub critic_grad_norm: f64,
}

impl StepMetrics {
    pub fn mean_accuracy(&self) -> f64 {
        self.episodes.iter().map(|e| e.accuracy).sum::<f64>() / self.episodes.len().max(1) as f64
    }
}

/// Meta-parameters (θ, LSLR table, critic W), normalization statistics and
/// outer-optimizer state.
#[derive(Clone, Debug)]
pub struct MetaLearner {
    pub arch: Arch,
    pub cfg: MetaConfig,
    pub theta: ParamSet,
    pub lslr: LslrTable,
    pub critic_spec: CriticSpec,
    pub critic: ParamSet,
    pub stats: RunningStats,
    adam: Adam,
}

fn norm(grads: &[Tensor]) -> f64 {
    // Starting from +0.0 keeps an empty list from reporting -0.0.
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(0.0, |acc, v| acc + v * v)
        .sqrt()
}

impl MetaLearner {
    /// Critic input length for `target_len` target samples per episode.
    pub fn feature_len(arch: &Arch, cfg: &MetaConfig, target_len: usize) -> usize {
        let pred = target_len * arch.num_classes();
        match cfg.variant.features() {
            Some(FeatureVariant::PredParams) => pred + arch.num_params(),
            _ => pred,
        }
    }

    pub fn new(arch: Arch, cfg: MetaConfig, init: InitScheme, target_len: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        arch.validate()?;
        if target_len == 0 {
            return Err(Error::Config("target set must hold at least one sample".into()));
        }
        let theta = arch.init_params(init, rng::derive_seed(seed, "theta", 0))?;
        let steps = cfg.inner_steps + cfg.effective_target_steps();
        let lslr = LslrTable::new(&theta, steps, cfg.lslr_init)?;
        let critic_spec = CriticSpec::with_width(Self::feature_len(&arch, &cfg, target_len), cfg.critic_kernels);
        let critic = critic_spec.init_params(rng::derive_seed(seed, "critic", 0))?;
        let stats = arch.running_stats(DEFAULT_NORM_MOMENTUM);
        let adam = Adam::new(cfg.outer_lr);
        Ok(Self {
            arch,
            cfg,
            theta,
            lslr,
            critic_spec,
            critic,
            stats,
            adam,
        })
    }

    pub fn base(&self) -> BaseModel<'_> {
        BaseModel::new(&self.arch, &self.stats)
    }

    /// Adapt to one episode from the given meta-parameters.
    ///
    /// Support steps differentiate through their gradients unless
    /// `first_order`; critic steps always do, so the critic parameters
    /// receive a gradient through the adapted weights.
    pub fn adapt(
        &self,
        theta: &ParamSet,
        lslr: &LslrTable,
        critic: &ParamSet,
        episode: &Episode,
        first_order: bool,
        create_graph: bool,
    ) -> Result<InnerTrajectory> {
        let base = self.base();
        let n = self.cfg.inner_steps;
        let mut traj = inner_adapt(&base, theta, &episode.support, lslr, n, create_graph && !first_order)?;
        if let Some(features) = self.cfg.variant.features() {
            let suffix = critic_adapt(
                &base,
                traj.last(),
                &episode.target.x,
                &self.critic_spec,
                critic,
                lslr,
                n,
                self.cfg.target_steps,
                features,
                create_graph,
            )?;
            traj.extend(suffix);
        }
        Ok(traj)
    }

    /// Summed outer loss over `batch` at the given meta-parameters.
    pub fn outer_loss(
        &self,
        theta: &ParamSet,
        lslr: &LslrTable,
        critic: &ParamSet,
        batch: &[Episode],
        epoch: usize,
    ) -> Result<(Tensor, Vec<EpisodeOutcome>)> {
        let base = self.base();
        let v = anneal_importance_weights(&self.cfg.v, epoch, self.cfg.anneal_end_epoch);
        let w = if self.cfg.effective_target_steps() > 0 {
            self.cfg.w.clone()
        } else {
            Vec::new()
        };
        let first_order = first_order_mode(&self.cfg, epoch);
        let mut total: Option<Tensor> = None;
        let mut outcomes = Vec::with_capacity(batch.len());
        for (b, ep) in batch.iter().enumerate() {
            let traj = self.adapt(theta, lslr, critic, ep, first_order, true)?;
            let loss = outer_loss_sca(&base, &traj, &ep.target, &v, &w, self.cfg.multi_step)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("outer loss {value} for episode {b} of the meta-batch")));
            }
            let logits = base.logits(traj.last(), &ep.target.x)?;
            outcomes.push(EpisodeOutcome {
                loss: value,
                accuracy: accuracy(&logits, &ep.target.y),
                support_losses: traj.support_losses.clone(),
                critic_values: traj.critic_values.clone(),
            });
            total = Some(match total {
                None => loss,
                Some(t) => t.add(&loss)?,
            });
        }
        let total = total.ok_or_else(|| Error::Config("empty meta-batch".into()))?;
        Ok((total, outcomes))
    }

    /// One outer update from a meta-batch of exactly `B` episodes. On any
    /// error the learner is left unchanged.
    pub fn meta_step(&mut self, batch: &[Episode], epoch: usize) -> Result<StepMetrics> {
        if batch.len() != self.cfg.meta_batch {
            return Err(Error::Config(format!(
                "meta-batch holds {} episodes, configured B = {}",
                batch.len(),
                self.cfg.meta_batch
            )));
        }
        let theta_v = self.theta.to_vars();
        let lslr_v = self.lslr.to_vars();
        let critic_v = self.critic.to_vars();
        let (loss, episodes) = self.outer_loss(&theta_v, &lslr_v, &critic_v, batch, epoch)?;

        // The plain MAML++ variant never touches the critic, so it is left
        // out of the backward pass and kept as is.
        let uses_critic = self.cfg.effective_target_steps() > 0;
        let mut wrt = theta_v.tensors();
        wrt.extend(lslr_v.rates.tensors());
        if uses_critic {
            wrt.extend(critic_v.tensors());
        }
        let mut grads = grad(&loss, &wrt, false)?;
        let critic_g = grads.split_off(theta_v.len() + lslr_v.rates.len());
        let mut lslr_g = grads.split_off(theta_v.len());
        let theta_g = grads;
        if self.cfg.gamma == GammaSource::Fixed {
            let n = self.cfg.inner_steps;
            for g in &mut lslr_g {
                let mut d = g.to_vec();
                d[n..].iter_mut().for_each(|x| *x = 0.0);
                *g = Tensor::constant(g.shape(), d)?;
            }
        }

        let mut adam = self.adam.clone();
        let (theta, rates) = match self.cfg.outer_optimizer {
            OuterOptimizer::Adam => {
                adam.tick();
                (
                    adam.apply("theta", &self.theta, &theta_g)?,
                    adam.apply("lslr", &self.lslr.rates, &lslr_g)?,
                )
            }
            OuterOptimizer::Sgd => (
                sgd(&self.theta, &theta_g, self.cfg.outer_lr)?,
                sgd(&self.lslr.rates, &lslr_g, self.cfg.outer_lr)?,
            ),
        };
        let critic = if uses_critic {
            sgd(&self.critic, &critic_g, self.cfg.critic_outer_step)?
        } else {
            self.critic.clone()
        };
        let lslr = LslrTable {
            rates,
            steps: self.lslr.steps,
        };
        let finite = |p: &ParamSet| p.iter().all(|e| e.tensor.is_finite());
        if !finite(&theta) || !lslr.all_finite() || (uses_critic && !finite(&critic)) {
            return Err(Error::NonFinite(format!("parameters after the meta-step at epoch {epoch}")));
        }

        let mut stats = self.stats.clone();
        for ep in batch {
            let (_, moments) = self.arch.forward_collect(&self.theta, &ep.support.x, &self.stats)?;
            stats.absorb(&moments)?;
        }

        self.theta = theta;
        self.lslr = lslr;
        self.critic = critic;
        self.stats = stats;
        self.adam = adam;
        Ok(StepMetrics {
            loss: loss.item()?,
            episodes,
            theta_grad_norm: norm(&theta_g),
            lslr_grad_norm: norm(&lslr_g),
            critic_grad_norm: norm(&critic_g),
        })
    }

    /// Adapt to `episode` from the current meta-parameters and score the
    /// final fast weights on its target set.
    pub fn evaluate(&self, episode: &Episode) -> Result<EpisodeOutcome> {
        let traj = self.adapt(
            &self.theta.to_vars(),
            &self.lslr.detached(),
            &self.critic.detached(),
            episode,
            false,
            false,
        )?;
        let base = self.base();
        let logits = base.logits(traj.last(), &episode.target.x)?;
        let loss = base.loss(traj.last(), &episode.target)?.item()?;
        Ok(EpisodeOutcome {
            loss,
            accuracy: accuracy(&logits, &episode.target.y),
            support_losses: traj.support_losses,
            critic_values: traj.critic_values,
        })
    }

    pub fn to_checkpoint(&self, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            arch: self.arch.clone(),
            meta,
            sections: vec![
                ("theta".into(), self.theta.detached()),
                ("lslr".into(), self.lslr.rates.detached()),
                ("critic".into(), self.critic.detached()),
            ],
            stats: self.stats.clone(),
        }
    }

    /// Restore meta-parameters and statistics saved by [`Self::to_checkpoint`].
    /// Optimizer moments are not part of a checkpoint.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.arch != self.arch {
            return Err(Error::Architecture(format!(
                "checkpoint holds a {} model that differs from the configured one",
                ck.arch.kind_name()
            )));
        }
        let section = |name: &str| {
            ck.section(name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint lacks the `{name}` section")))
        };
        let theta = section("theta")?;
        self.arch.check_params(&theta)?;
        let lslr = LslrTable::from_rates(section("lslr")?)?;
        if lslr.steps != self.lslr.steps || lslr.rates.names().ne(self.lslr.rates.names()) {
            return Err(Error::Config("checkpoint LSLR table does not match the configuration".into()));
        }
        let critic = section("critic")?;
        self.critic_spec.check_params(&critic)?;
        self.theta = theta;
        self.lslr = lslr;
        self.critic = critic;
        self.stats = ck.stats.clone();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::Variant;
    use super::*;
    use crate::networks::LowEndSpec;
    use crate::tasks::{BlobsSpec, Split};

    fn episodes(n: usize) -> Vec<Episode> {
        let fam = BlobsSpec {
            dim: 4,
            ..BlobsSpec::default()
        }
        .build(1)
        .unwrap();
        (0..n)
            .map(|i| fam.sample_episode(Split::Train, i as u64, 3, 1, 2).unwrap())
            .collect()
    }

    fn learner(variant: Variant) -> MetaLearner {
        let arch = Arch::LowEnd(LowEndSpec::mlp(4, 3, 1, 6));
        let mut cfg = MetaConfig::new(2, 1, variant);
        cfg.critic_kernels = 2;
        MetaLearner::new(arch, cfg, InitScheme::FaninUniform, 6, 3).unwrap()
    }

    #[test]
    fn maml_step_leaves_critic_alone() {
        let mut l = learner(Variant::MamlPp);
        let before = l.critic.clone();
        let m = l.meta_step(&episodes(2), 0).unwrap();
        assert_eq!(m.critic_grad_norm, 0.0);
        assert_eq!(l.critic.max_abs_diff(&before).unwrap(), 0.0);
        assert!(m.theta_grad_norm > 0.0);
    }

    #[test]
    fn sca_step_moves_critic() {
        let mut l = learner(Variant::ScaPred);
        let m = l.meta_step(&episodes(2), 0).unwrap();
        assert!(m.critic_grad_norm > 0.0);
        assert_eq!(m.episodes[0].critic_values.len(), 1);
    }

    #[test]
    fn wrong_batch_size_rejected_without_change() {
        let mut l = learner(Variant::ScaPred);
        let before = l.theta.clone();
        assert!(l.meta_step(&episodes(3), 0).is_err());
        assert_eq!(l.theta.max_abs_diff(&before).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_restores_evaluation() {
        let mut l = learner(Variant::ScaPred);
        let eps = episodes(2);
        l.meta_step(&eps, 0).unwrap();
        let ck = Checkpoint::from_bytes(&l.to_checkpoint(BTreeMap::new()).to_bytes(), "mem").unwrap();
        let mut fresh = learner(Variant::ScaPred);
        fresh.load_checkpoint(&ck).unwrap();
        let a = l.evaluate(&eps[0]).unwrap();
        let b = fresh.evaluate(&eps[0]).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.loss, b.loss);
    }
}
