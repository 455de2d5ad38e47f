//! Finite-difference gradient checks over the primitive set, a
//! second-order composition and the full critic-driven outer loss.

use serde::Serialize;

use crate::autodiff::functional::{
    avg_pool2d, batch_norm_running, conv1d, conv2d, global_avg_pool2d, max_pool2d, mse_loss, nll_loss, Conv1dAttrs,
};
use crate::autodiff::{finite_difference_check, grad, Tensor};
use crate::metalearn::{LslrTable, MetaConfig, MetaLearner, Variant};
use crate::networks::{Arch, InitScheme, LowEndSpec};
use crate::params::{ParamSet, Partition};
use crate::tasks::{Episode, LabeledSet};
use crate::{rng, Result};

use rand::Rng;

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const SECOND_ORDER_TOL: f64 = 1e-5;
pub const OUTER_LOSS_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckEntry {
    pub fn passes(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn values(label: &str, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut r = rng::stream(17, label, n as u64);
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Values in `±[min_abs, 1)`, keeping clear of kinks at zero.
fn away_from_zero(label: &str, n: usize, min_abs: f64) -> Vec<f64> {
    let mut r = rng::stream(17, label, n as u64);
    (0..n)
        .map(|_| {
            let m = r.random_range(min_abs..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn param_set(entries: Vec<(&str, Vec<usize>, Vec<f64>)>) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    for (name, shape, data) in entries {
        p.push(name, Tensor::constant(&shape, data)?, Partition::Adapted)?;
    }
    Ok(p)
}

fn rand_param(name: &'static str, shape: &[usize]) -> (&'static str, Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (name, shape.to_vec(), values(name, n, -1.0, 1.0))
}

/// Scalar probe `Σ out ⊙ R` with a fixed random `R`, so every output
/// coordinate contributes with a distinct weight.
fn probe(out: &Tensor) -> Result<Tensor> {
    let r = Tensor::constant(out.shape(), values("probe", out.numel(), -1.0, 1.0))?;
    Ok(out.mul(&r)?.sum())
}

fn check<F>(name: &str, at: ParamSet, tol: f64, f: F) -> Result<GradcheckEntry>
where
    F: Fn(&ParamSet) -> Result<Tensor>,
{
    let report = finite_difference_check(&f, &at, STEP)?;
    Ok(GradcheckEntry {
        name: name.to_string(),
        coordinates: at.numel(),
        max_rel_err: report.max_rel_err,
        tolerance: tol,
    })
}

fn g<'a>(p: &'a ParamSet, name: &str) -> Result<&'a Tensor> {
    p.get(name)
}

/// One entry per differentiable primitive.
pub fn primitive_checks() -> Result<Vec<GradcheckEntry>> {
    let t = PRIMITIVE_TOL;
    let mut out = Vec::new();
    out.push(check(
        "matmul",
        param_set(vec![rand_param("a", &[3, 4]), rand_param("b", &[4, 2])])?,
        t,
        |p| probe(&g(p, "a")?.matmul(g(p, "b")?)?),
    )?);
    out.push(check(
        "add",
        param_set(vec![rand_param("a", &[2, 3]), rand_param("b", &[2, 3])])?,
        t,
        |p| probe(&g(p, "a")?.add(g(p, "b")?)?),
    )?);
    out.push(check(
        "broadcast_add",
        param_set(vec![rand_param("a", &[2, 3]), rand_param("b", &[3])])?,
        t,
        |p| probe(&g(p, "a")?.add_bcast(g(p, "b")?)?),
    )?);
    out.push(check(
        "mul",
        param_set(vec![rand_param("a", &[2, 3]), rand_param("b", &[2, 3])])?,
        t,
        |p| probe(&g(p, "a")?.mul(g(p, "b")?)?),
    )?);
    out.push(check(
        "relu",
        param_set(vec![("x", vec![3, 4], away_from_zero("relu", 12, 1e-3))])?,
        t,
        |p| probe(&g(p, "x")?.relu()),
    )?);
    out.push(check(
        "sigmoid",
        param_set(vec![("x", vec![3, 4], values("sigmoid", 12, -3.0, 3.0))])?,
        t,
        |p| probe(&g(p, "x")?.sigmoid()),
    )?);
    out.push(check("softmax", param_set(vec![rand_param("x", &[2, 5])])?, t, |p| {
        probe(&g(p, "x")?.softmax()?)
    })?);
    out.push(check("log_softmax", param_set(vec![rand_param("x", &[2, 5])])?, t, |p| {
        probe(&g(p, "x")?.log_softmax()?)
    })?);
    out.push(check("nll_loss", param_set(vec![rand_param("x", &[3, 4])])?, t, |p| {
        Ok(nll_loss(g(p, "x")?, &[0, 3, 1])?)
    })?);
    let target = Tensor::constant(&[2, 3], values("mse-target", 6, -1.0, 1.0))?;
    out.push(check("mse_loss", param_set(vec![rand_param("x", &[2, 3])])?, t, |p| {
        Ok(mse_loss(g(p, "x")?, &target)?)
    })?);
    for (name, dilation, pad_left, pad_right) in [("conv1d_asym_pad", 1, 0, 1), ("conv1d_dilated", 4, 2, 2)] {
        let attrs = Conv1dAttrs {
            dilation,
            stride: 1,
            pad_left,
            pad_right,
        };
        out.push(check(
            name,
            param_set(vec![rand_param("x", &[2, 2, 7]), rand_param("w", &[3, 2, 2]), rand_param("b", &[3])])?,
            t,
            move |p| probe(&conv1d(g(p, "x")?, g(p, "w")?, g(p, "b")?, attrs)?),
        )?);
    }
    out.push(check(
        "conv2d",
        param_set(vec![rand_param("x", &[1, 2, 4, 4]), rand_param("w", &[3, 2, 3, 3]), rand_param("b", &[3])])?,
        t,
        |p| probe(&conv2d(g(p, "x")?, g(p, "w")?, g(p, "b")?, 1, 1)?),
    )?);
    out.push(check("global_avg_pool", param_set(vec![rand_param("x", &[2, 3, 3, 3])])?, t, |p| {
        probe(&global_avg_pool2d(g(p, "x")?)?)
    })?);
    // distinct, well-separated values so the argmax inside each window is stable
    let mut pool_vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
    let mut r = rng::stream(17, "pool", 0);
    for i in (1..pool_vals.len()).rev() {
        pool_vals.swap(i, r.random_range(0..=i));
    }
    out.push(check("max_pool2d", param_set(vec![("x", vec![1, 2, 4, 4], pool_vals)])?, t, |p| {
        probe(&max_pool2d(g(p, "x")?)?)
    })?);
    out.push(check("avg_pool2d", param_set(vec![rand_param("x", &[1, 2, 4, 4])])?, t, |p| {
        probe(&avg_pool2d(g(p, "x")?)?)
    })?);
    out.push(check(
        "concat",
        param_set(vec![rand_param("a", &[2, 1, 3]), rand_param("b", &[2, 2, 3])])?,
        t,
        |p| probe(&Tensor::concat(&[g(p, "a")?.clone(), g(p, "b")?.clone()], 1)?),
    )?);
    out.push(check("reshape_flatten", param_set(vec![rand_param("x", &[2, 3, 2])])?, t, |p| {
        probe(&g(p, "x")?.reshape(&[3, 4])?.flatten()?)
    })?);
    let (mean, var) = (vec![0.2, -0.1, 0.0], vec![1.5, 0.5, 2.0]);
    out.push(check(
        "batch_norm_running",
        param_set(vec![rand_param("x", &[2, 3, 2, 2]), rand_param("gamma", &[3]), rand_param("beta", &[3])])?,
        t,
        |p| probe(&batch_norm_running(g(p, "x")?, &mean, &var, g(p, "gamma")?, g(p, "beta")?)?),
    )?);
    out.push(check("sum", param_set(vec![rand_param("x", &[2, 3])])?, t, |p| {
        Ok(g(p, "x")?.mul(g(p, "x")?)?.sum())
    })?);
    out.push(check("mean", param_set(vec![rand_param("x", &[2, 3])])?, t, |p| {
        Ok(g(p, "x")?.mul(g(p, "x")?)?.mean())
    })?);
    Ok(out)
}

/// `f(θ) = g(θ − α∇h(θ))` with `g(u) = Σ u³/3 + u²`, `h(θ) = Σ θ⁴/4 + θ₀θ₁`.
pub fn second_order_check() -> Result<GradcheckEntry> {
    let alpha = 0.1;
    check(
        "second_order_inner_step",
        param_set(vec![rand_param("theta", &[4])])?,
        SECOND_ORDER_TOL,
        move |p| {
            let th = g(p, "theta")?;
            let sq = th.mul(th)?;
            let h = sq.mul(&sq)?.sum().scale(0.25).add(
                &th.narrow(0, 0, 1)?.mul(&th.narrow(0, 1, 1)?)?.sum(),
            )?;
            let dh = grad(&h, std::slice::from_ref(th), true)?.remove(0);
            let u = th.sub(&dh.scale(alpha))?;
            let u2 = u.mul(&u)?;
            Ok(u2.mul(&u)?.sum().scale(1.0 / 3.0).add(&u2.sum())?)
        },
    )
}

/// A tiny critic-driven instance: a 2-in, 2-class MLP (16 parameters) with
/// one support step and one critic step, a single-sample target set, and a
/// one-kernel-per-layer critic on the resulting 2-value feature vector.
pub fn tiny_sca_instance(seed: u64) -> Result<(MetaLearner, Vec<Episode>)> {
    let arch = Arch::LowEnd(LowEndSpec::mlp(2, 2, 1, 2));
    let mut cfg = MetaConfig::new(1, 1, Variant::ScaPred);
    cfg.meta_batch = 1;
    cfg.critic_kernels = 1;
    cfg.lslr_init = 0.3;
    let learner = MetaLearner::new(arch, cfg, InitScheme::FaninUniform, 1, seed)?;
    let xs = values(&format!("tiny-x-{seed}"), 6, -1.5, 1.5);
    let episode = Episode {
        task_id: format!("tiny-{seed}"),
        way: 2,
        shot: 1,
        query: 1,
        classes: vec!["a".into(), "b".into()],
        support: LabeledSet {
            x: Tensor::constant(&[2, 2], xs[..4].to_vec())?,
            y: vec![0, 1],
        },
        target: LabeledSet {
            x: Tensor::constant(&[1, 2], xs[4..].to_vec())?,
            y: vec![1],
        },
    };
    Ok((learner, vec![episode]))
}

/// Objective over the merged `theta.` / `lslr.` / `critic.` parameter set.
pub fn joint_outer_loss(learner: &MetaLearner, batch: &[Episode], joint: &ParamSet) -> Result<Tensor> {
    let lslr = LslrTable::from_rates(joint.strip_prefix("lslr."))?;
    let (loss, _) = learner.outer_loss(
        &joint.strip_prefix("theta."),
        &lslr,
        &joint.strip_prefix("critic."),
        batch,
        0,
    )?;
    Ok(loss)
}

pub fn joint_params(learner: &MetaLearner) -> Result<ParamSet> {
    ParamSet::merged(&[
        ("theta.", &learner.theta),
        ("lslr.", &learner.lslr.rates),
        ("critic.", &learner.critic),
    ])
}

/// Outer-loss gradient with respect to θ, the LSLR table and the critic.
pub fn sca_outer_loss_check(seed: u64) -> Result<GradcheckEntry> {
    let (learner, batch) = tiny_sca_instance(seed)?;
    let at = joint_params(&learner)?;
    let report = finite_difference_check(|p| joint_outer_loss(&learner, &batch, p), &at, 1e-5)?;
    Ok(GradcheckEntry {
        name: format!("sca_pred_outer_loss[seed {seed}]"),
        coordinates: at.numel(),
        max_rel_err: report.max_rel_err,
        tolerance: OUTER_LOSS_TOL,
    })
}

/// Everything the `gradcheck` subcommand reports.
pub fn full_suite() -> Result<Vec<GradcheckEntry>> {
    let mut out = primitive_checks()?;
    out.push(second_order_check()?);
    out.push(sca_outer_loss_check(0)?);
    Ok(out)
}
