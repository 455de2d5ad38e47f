//! Meta-learning loops: MAML++ inner/outer updates and the critic-driven
//! target-set adaptation step.

mod inner;
mod learner;
mod optim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use inner::{
    collect_features, critic_adapt, inner_adapt, outer_loss_maml_pp, outer_loss_sca, BaseModel, InnerTrajectory,
    LslrTable,
};
pub use learner::{EpisodeOutcome, MetaLearner, StepMetrics};
pub use optim::{Adam, OuterOptimizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MamlPp,
    ScaPred,
    ScaPredParams,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::MamlPp => "maml_pp",
            Variant::ScaPred => "sca_pred",
            Variant::ScaPredParams => "sca_pred_params",
        }
    }

    /// Critic feature layout, or `None` for the plain MAML++ variant.
    pub fn features(self) -> Option<FeatureVariant> {
        match self {
            Variant::MamlPp => None,
            Variant::ScaPred => Some(FeatureVariant::Pred),
            Variant::ScaPredParams => Some(FeatureVariant::PredParams),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maml_pp" => Ok(Variant::MamlPp),
            "sca_pred" => Ok(Variant::ScaPred),
            "sca_pred_params" => Ok(Variant::ScaPredParams),
            other => Err(Error::Unknown {
                kind: "variant",
                value: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What goes into the critic's flat input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureVariant {
    /// Flattened target-set softmax predictions.
    Pred,
    /// Predictions followed by every base parameter, in parameter-set order.
    PredParams,
}

/// Where the critic-step sizes come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaSource {
    /// LSLR entries for the target steps, updated by the outer optimizer.
    Learned,
    /// LSLR entries for the target steps, frozen at their initial value.
    Fixed,
}

impl FromStr for GammaSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(GammaSource::Learned),
            "fixed" => Ok(GammaSource::Fixed),
            other => Err(Error::Unknown {
                kind: "gamma source",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    /// Inner steps on the support set (`N`).
    pub inner_steps: usize,
    /// Critic-driven steps on the target set (`I`).
    pub target_steps: usize,
    /// Episodes per meta-batch (`B`).
    pub meta_batch: usize,
    /// Outer step size for θ and the LSLR table (`β`).
    pub outer_lr: f64,
    pub outer_optimizer: OuterOptimizer,
    pub gamma: GammaSource,
    /// Initial value of every LSLR entry.
    pub lslr_init: f64,
    /// Plain SGD step size for the critic parameters.
    pub critic_outer_step: f64,
    /// Support-step importance weights `v`, length `N`.
    pub v: Vec<f64>,
    /// Target-step importance weights `w`, length `I`.
    pub w: Vec<f64>,
    /// Epoch by which `v` has been annealed to one-hot on the last step.
    pub anneal_end_epoch: usize,
    pub first_order_epochs: usize,
    pub variant: Variant,
    pub multi_step: bool,
    /// Kernels per critic conv layer.
    pub critic_kernels: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self::new(5, 1, Variant::MamlPp)
    }
}

impl MetaConfig {
    /// Defaults with uniform `v` over `n` steps and uniform `w` over `i` steps.
    pub fn new(n: usize, i: usize, variant: Variant) -> Self {
        Self {
            inner_steps: n,
            target_steps: i,
            meta_batch: 2,
            outer_lr: 1e-3,
            outer_optimizer: OuterOptimizer::Adam,
            gamma: GammaSource::Learned,
            lslr_init: 0.01,
            critic_outer_step: 1e-6,
            v: uniform(n),
            w: uniform(i),
            anneal_end_epoch: 15,
            first_order_epochs: 0,
            variant,
            multi_step: false,
            critic_kernels: crate::networks::CRITIC_KERNELS_PER_LAYER,
        }
    }

    /// Meta-batch size for a given shot count: 2 for one-shot, 1 otherwise.
    pub fn default_meta_batch(shot: usize) -> usize {
        if shot <= 1 {
            2
        } else {
            1
        }
    }

    /// Critic steps actually taken: zero for the plain MAML++ variant.
    pub fn effective_target_steps(&self) -> usize {
        if self.variant.features().is_some() {
            self.target_steps
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps (N) must be at least 1".into()));
        }
        if self.meta_batch == 0 {
            return Err(Error::Config("meta_batch (B) must be at least 1".into()));
        }
        check_simplex("v", &self.v, self.inner_steps)?;
        check_simplex("w", &self.w, self.target_steps)?;
        for (name, x) in [
            ("outer_lr", self.outer_lr),
            ("lslr_init", self.lslr_init),
            ("critic_outer_step", self.critic_outer_step),
        ] {
            if !x.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {x}")));
            }
        }
        if self.critic_kernels == 0 {
            return Err(Error::Config("critic_kernels must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n.max(1) as f64; n]
}

fn check_simplex(name: &str, weights: &[f64], len: usize) -> Result<()> {
    if weights.len() != len {
        return Err(Error::Config(format!(
            "importance weights {name} have length {}, expected {len}",
            weights.len()
        )));
    }
    if len == 0 {
        return Ok(());
    }
    if weights.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Config(format!("importance weights {name} must be non-negative: {weights:?}")));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("importance weights {name} sum to {s}, expected 1")));
    }
    Ok(())
}

/// Linear interpolation from `v` toward one-hot on the last step, reaching
/// it at `end_epoch`.
pub fn anneal_importance_weights(v: &[f64], epoch: usize, end_epoch: usize) -> Vec<f64> {
    let n = v.len();
    if n == 0 {
        return Vec::new();
    }
    let frac = if end_epoch == 0 {
        1.0
    } else {
        (epoch as f64 / end_epoch as f64).min(1.0)
    };
    let mut out: Vec<f64> = v.iter().map(|x| (1.0 - frac) * x).collect();
    out[n - 1] += frac;
    out
}

/// True while inner-loop gradients are treated as constants.
pub fn first_order_mode(cfg: &MetaConfig, epoch: usize) -> bool {
    epoch < cfg.first_order_epochs
}
