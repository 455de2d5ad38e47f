use crate::autodiff::functional::nll_loss;
use crate::autodiff::{grad, Tensor};
use crate::networks::{critic_forward, Arch, CriticSpec, RunningStats};
use crate::params::{ParamSet, Partition};
use crate::tasks::LabeledSet;
use crate::{Error, Result};

use super::FeatureVariant;

/// A base architecture together with the normalization statistics it runs under.
#[derive(Clone, Copy, Debug)]
pub struct BaseModel<'a> {
    pub arch: &'a Arch,
    pub stats: &'a RunningStats,
}

impl<'a> BaseModel<'a> {
    pub fn new(arch: &'a Arch, stats: &'a RunningStats) -> Self {
        Self { arch, stats }
    }

    pub fn logits(&self, theta: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.arch.forward(theta, x, self.stats)
    }

    pub fn loss(&self, theta: &ParamSet, set: &LabeledSet) -> Result<Tensor> {
        Ok(nll_loss(&self.logits(theta, &set.x)?, &set.y)?)
    }
}

/// Learned step sizes: one vector of length `steps` per adapted tensor,
/// stored under that tensor's name. Entry `i` scales inner step `i`
/// (support steps `0..N`, then critic steps `N..N+I`).
#[derive(Clone, Debug)]
pub struct LslrTable {
    pub rates: ParamSet,
    pub steps: usize,
}

impl LslrTable {
    pub fn new(theta: &ParamSet, steps: usize, init: f64) -> Result<Self> {
        let mut rates = ParamSet::new();
        for e in theta.iter().filter(|e| e.partition == Partition::Adapted) {
            rates.push(e.name.clone(), Tensor::full(&[steps], init), Partition::Adapted)?;
        }
        Ok(Self { rates, steps })
    }

    pub fn from_rates(rates: ParamSet) -> Result<Self> {
        let steps = rates.iter().next().map(|e| e.tensor.numel()).unwrap_or(0);
        if rates.iter().any(|e| e.tensor.shape() != [steps]) {
            return Err(Error::Config("LSLR entries must all be vectors of the same length".into()));
        }
        Ok(Self { rates, steps })
    }

    /// Scalar step size for `name` at `step`, on the graph when the table is.
    pub fn rate(&self, name: &str, step: usize) -> Result<Tensor> {
        if step >= self.steps {
            return Err(Error::Config(format!(
                "inner step {step} beyond the {}-step LSLR table",
                self.steps
            )));
        }
        Ok(self.rates.get(name)?.narrow(0, step, 1)?.reshape(&[])?)
    }

    pub fn to_vars(&self) -> Self {
        Self {
            rates: self.rates.to_vars(),
            steps: self.steps,
        }
    }

    pub fn detached(&self) -> Self {
        Self {
            rates: self.rates.detached(),
            steps: self.steps,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.rates.iter().all(|e| e.tensor.is_finite())
    }
}

/// Fast weights visited by the inner loops, `θ_0 ..= θ_{N+I}`.
#[derive(Clone, Debug, Default)]
pub struct InnerTrajectory {
    pub params: Vec<ParamSet>,
    pub support_losses: Vec<f64>,
    pub critic_values: Vec<f64>,
}

impl InnerTrajectory {
    pub fn last(&self) -> &ParamSet {
        self.params.last().expect("a trajectory always holds its starting point")
    }

    /// Append a critic suffix whose first entry is this trajectory's last.
    pub fn extend(&mut self, suffix: InnerTrajectory) {
        self.params.extend(suffix.params.into_iter().skip(1));
        self.critic_values.extend(suffix.critic_values);
    }
}

/// `θ' = θ − α_step ⊙ g` over the adapted tensors; shared tensors carry over.
fn descend(theta: &ParamSet, names: &[String], grads: Vec<Tensor>, lslr: &LslrTable, step: usize) -> Result<ParamSet> {
    let mut updates = Vec::with_capacity(names.len());
    for (name, g) in names.iter().zip(grads) {
        let rate = lslr.rate(name, step)?.expand(g.shape())?;
        let next = theta.get(name)?.sub(&rate.mul(&g)?)?;
        updates.push((name.clone(), next));
    }
    theta.with_replaced(&updates)
}

fn adapted_tensors(theta: &ParamSet, names: &[String]) -> Result<Vec<Tensor>> {
    names.iter().map(|n| theta.get(n).cloned()).collect()
}

/// `N` gradient steps on the support loss. With `create_graph` off, the
/// step gradients are constants and only the identity path through each
/// `θ_i` (and the step sizes) stays differentiable.
pub fn inner_adapt(
    base: &BaseModel<'_>,
    theta: &ParamSet,
    support: &LabeledSet,
    lslr: &LslrTable,
    n: usize,
    create_graph: bool,
) -> Result<InnerTrajectory> {
    if n == 0 {
        return Err(Error::Config("inner_adapt needs at least one step".into()));
    }
    let names = theta.adapted_names();
    let mut traj = InnerTrajectory {
        params: vec![theta.clone()],
        ..Default::default()
    };
    for step in 0..n {
        let cur = traj.last();
        let loss = base.loss(cur, support)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("support loss {value} at inner step {step}")));
        }
        let grads = grad(&loss, &adapted_tensors(cur, &names)?, create_graph)?;
        let next = descend(cur, &names, grads, lslr, step)?;
        traj.support_losses.push(value);
        traj.params.push(next);
    }
    Ok(traj)
}

/// Flat critic input `(1, L)`: softmax predictions on `x_t` row-major over
/// samples then classes, then (for `PredParams`) every tensor of `theta`.
pub fn collect_features(base: &BaseModel<'_>, theta: &ParamSet, x_t: &Tensor, variant: FeatureVariant) -> Result<Tensor> {
    if x_t.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Task("critic features need a non-empty target set".into()));
    }
    let probs = base.logits(theta, x_t)?.softmax()?;
    let pred = probs.reshape(&[1, probs.numel()])?;
    match variant {
        FeatureVariant::Pred => Ok(pred),
        FeatureVariant::PredParams => {
            let mut parts = vec![pred];
            for e in theta.iter() {
                parts.push(e.tensor.reshape(&[1, e.tensor.numel()])?);
            }
            Ok(Tensor::concat(&parts, 1)?)
        }
    }
}

/// `I` label-free steps on the target inputs driven by the critic value,
/// using LSLR entries `start_step..start_step + I`. The returned trajectory
/// starts at `theta_n`.
#[allow(clippy::too_many_arguments)]
pub fn critic_adapt(
    base: &BaseModel<'_>,
    theta_n: &ParamSet,
    x_t: &Tensor,
    spec: &CriticSpec,
    w: &ParamSet,
    lslr: &LslrTable,
    start_step: usize,
    i: usize,
    features: FeatureVariant,
    create_graph: bool,
) -> Result<InnerTrajectory> {
    let names = theta_n.adapted_names();
    let mut traj = InnerTrajectory {
        params: vec![theta_n.clone()],
        ..Default::default()
    };
    for j in 0..i {
        let cur = traj.last();
        let f = collect_features(base, cur, x_t, features)?;
        let c = critic_forward(spec, w, &f)?;
        let value = c.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("critic value {value} at target step {j}")));
        }
        let grads = grad(&c, &adapted_tensors(cur, &names)?, create_graph)?;
        let next = descend(cur, &names, grads, lslr, start_step + j)?;
        traj.critic_values.push(value);
        traj.params.push(next);
    }
    Ok(traj)
}

fn weighted_losses(base: &BaseModel<'_>, points: &[ParamSet], target: &LabeledSet, weights: &[f64]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (theta, &wt) in points.iter().zip(weights) {
        let term = base.loss(theta, target)?.scale(wt);
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// `Σ_i v_i · L(θ_i)` over the support steps `i = 1..=N`, with `N = |v|`.
pub fn outer_loss_maml_pp(
    base: &BaseModel<'_>,
    traj: &InnerTrajectory,
    target: &LabeledSet,
    v: &[f64],
) -> Result<Tensor> {
    let n = v.len();
    if n == 0 || traj.params.len() < n + 1 {
        return Err(Error::Config(format!(
            "{} importance weights for a trajectory of {} points",
            n,
            traj.params.len()
        )));
    }
    weighted_losses(base, &traj.params[1..=n], target, v)
}

/// The MAML++ term plus the labeled target loss after the critic steps:
/// at `θ_{N+I}` alone, or (`multi_step`) `Σ_j w_j · L(θ_{N+j})`. With
/// `I = |w| = 0` this is exactly the MAML++ loss.
pub fn outer_loss_sca(
    base: &BaseModel<'_>,
    traj: &InnerTrajectory,
    target: &LabeledSet,
    v: &[f64],
    w: &[f64],
    multi_step: bool,
) -> Result<Tensor> {
    let (n, i) = (v.len(), w.len());
    if traj.params.len() != n + i + 1 {
        return Err(Error::Config(format!(
            "trajectory has {} points, expected N + I + 1 = {}",
            traj.params.len(),
            n + i + 1
        )));
    }
    let base_term = outer_loss_maml_pp(base, traj, target, v)?;
    if i == 0 {
        return Ok(base_term);
    }
    let critic_term = if multi_step {
        weighted_losses(base, &traj.params[n + 1..], target, w)?
    } else {
        base.loss(&traj.params[n + i], target)?
    };
    Ok(base_term.add(&critic_term)?)
}
