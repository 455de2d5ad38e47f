//! One line per acceptance criterion; exits nonzero if any fails.
//!
//! Runs without the libtest harness so the lines come out in order and
//! uncaptured.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use metacritic::harness::{ci95, format_cell, gradcheck, run_experiment, EarlyStopper, ExperimentConfig, Settings};
use metacritic::metalearn::{
    critic_adapt, inner_adapt, outer_loss_maml_pp, outer_loss_sca, BaseModel, FeatureVariant, LslrTable, MetaConfig,
    MetaLearner, Variant,
};
use metacritic::networks::{estimate_critic_memory, pad_for_layer, Arch, CriticSpec, HighEndSpec, InitScheme, LowEndSpec};
use metacritic::tasks::{BlobsSpec, GlyphsSpec, Split};
use metacritic::Tensor;

type Outcome = anyhow::Result<(bool, String)>;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const TINY_NET_MAX_PARAMS: usize = 200;
const REDUCTION_TOL: f64 = 1e-12;
const BATCH_TOL: f64 = 1e-12;
const MEMORY_TARGET_BYTES: f64 = 32e12;
const MEMORY_REL_TOL: f64 = 0.05;
const BENCH_BUDGET: Duration = Duration::from_secs(15 * 60);
const BENCH_MIN_MAML: f64 = 0.60;

fn gradcheck_suite() -> Outcome {
    let start = Instant::now();
    let entries = gradcheck::full_suite()?;
    let took = start.elapsed();
    let (learner, _) = gradcheck::tiny_sca_instance(0)?;
    let base_params = learner.theta.numel();
    let critic_params = learner.critic.numel();
    let failed: Vec<_> = entries.iter().filter(|e| !e.passes()).map(|e| e.name.clone()).collect();
    let worst_prim = entries
        .iter()
        .filter(|e| e.tolerance == gradcheck::PRIMITIVE_TOL)
        .map(|e| e.max_rel_err)
        .fold(0.0, f64::max);
    let outer = entries
        .iter()
        .filter(|e| e.tolerance == gradcheck::OUTER_LOSS_TOL)
        .map(|e| e.max_rel_err)
        .fold(0.0, f64::max);
    let ok = failed.is_empty() && took <= GRADCHECK_BUDGET && base_params <= TINY_NET_MAX_PARAMS;
    Ok((
        ok,
        format!(
            "{} checks, primitives max rel err {worst_prim:.1e} (tol 1e-6), sca outer loss {outer:.1e} (tol 1e-4), \
             base net {base_params} params, critic {critic_params} params, {:.1}s (budget 120s){}",
            entries.len(),
            took.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(",")) }
        ),
    ))
}

fn mlp() -> Arch {
    Arch::LowEnd(LowEndSpec::mlp(4, 3, 1, 5))
}

fn blob_episodes(count: usize, way: usize, query: usize) -> anyhow::Result<Vec<metacritic::tasks::Episode>> {
    let fam = BlobsSpec {
        dim: 4,
        ..BlobsSpec::default()
    }
    .build(5)?;
    Ok((0..count)
        .map(|i| fam.sample_episode(Split::Train, i as u64, way, 1, query))
        .collect::<Result<_, _>>()?)
}

fn reduction_equivalence() -> Outcome {
    let eps = blob_episodes(10, 3, 3)?;
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mk = |variant| -> anyhow::Result<MetaLearner> {
            let mut cfg = MetaConfig::new(3, 0, variant);
            cfg.critic_kernels = 2;
            Ok(MetaLearner::new(mlp(), cfg, InitScheme::FaninUniform, 9, seed)?)
        };
        let (mut maml, mut sca) = (mk(Variant::MamlPp)?, mk(Variant::ScaPred)?);
        for batch in eps.chunks(2) {
            maml.meta_step(batch, 0)?;
            sca.meta_step(batch, 0)?;
            worst = worst.max(maml.theta.max_abs_diff(&sca.theta)?);
        }
    }
    Ok((worst <= REDUCTION_TOL, format!("3 seeds x 5 meta-steps, max |Δθ| {worst:.1e} (tol 1e-12)")))
}

fn critic_shape_laws() -> Outcome {
    let mut ok = true;
    for len in [17, 64, 257] {
        let spec = CriticSpec::new(len);
        let s = spec.shapes()?;
        ok &= s.conv_out_lens == vec![len; 5];
        ok &= s.conv_in_channels.iter().enumerate().all(|(i, &c)| c == 1 + 8 * i);
        ok &= s.fc_in_dim == 41 * len && spec.fc_in_dim() == 41 * len;
    }
    let pads = (0..5).map(pad_for_layer).collect::<Result<Vec<_>, _>>()?;
    ok &= pads == [(0, 1), (1, 1), (2, 2), (4, 4), (8, 8)];
    Ok((ok, format!("L in {{17, 64, 257}}, padding table {pads:?}")))
}

fn memory_estimator() -> Outcome {
    let bytes = estimate_critic_memory(70_000, 4)? as f64;
    let rel = (bytes / MEMORY_TARGET_BYTES - 1.0).abs();
    let quadratic = [1u64, 500, 70_000]
        .iter()
        .map(|&p| Ok(estimate_critic_memory(2 * p, 4)? == 4 * estimate_critic_memory(p, 4)?))
        .collect::<anyhow::Result<Vec<bool>>>()?
        .into_iter()
        .all(|b| b);
    Ok((
        rel <= MEMORY_REL_TOL && quadratic,
        format!("{:.2} TB for 70000 params ({:.1}% off 32 TB, tol 5%), f(2p) = 4 f(p): {quadratic}", bytes / 1e12, 100.0 * rel),
    ))
}

fn multi_step_loss() -> Outcome {
    let arch = mlp();
    let stats = arch.running_stats(0.99);
    let base = BaseModel::new(&arch, &stats);
    let theta = arch.init_params(InitScheme::FaninUniform, 3)?.to_vars();
    let ep = blob_episodes(1, 3, 3)?.remove(0);
    let lslr = LslrTable::new(&theta, 4, 0.2)?;
    let mut traj = inner_adapt(&base, &theta, &ep.support, &lslr, 3, true)?;
    let one_hot = outer_loss_maml_pp(&base, &traj, &ep.target, &[0.0, 0.0, 1.0])?.item()?;
    let last = base.loss(&traj.params[3], &ep.target)?.item()?;

    let spec = CriticSpec::with_width(ep.target.len() * 3, 2);
    let w = spec.init_params(1)?;
    traj.extend(critic_adapt(&base, traj.last(), &ep.target.x, &spec, &w, &lslr, 3, 1, FeatureVariant::Pred, true)?);
    let v = [1.0 / 3.0; 3];
    let multi = outer_loss_sca(&base, &traj, &ep.target, &v, &[1.0], true)?.item()?;
    let single = outer_loss_sca(&base, &traj, &ep.target, &v, &[1.0], false)?.item()?;
    Ok((
        one_hot == last && multi == single,
        format!("one-hot v: {one_hot} vs final {last}; I=1 multi-step {multi} vs single {single} (exact)"),
    ))
}

fn label_hygiene() -> Outcome {
    let mut cfg = MetaConfig::new(2, 2, Variant::ScaPred);
    cfg.critic_kernels = 2;
    let l = MetaLearner::new(mlp(), cfg, InitScheme::FaninUniform, 9, 4)?;
    let ep = blob_episodes(1, 3, 3)?.remove(0);
    let mut permuted = ep.clone();
    permuted.target.y.reverse();
    let adapt = |e| l.adapt(&l.theta.to_vars(), &l.lslr.to_vars(), &l.critic.to_vars(), e, false, true);
    let (a, b) = (adapt(&ep)?, adapt(&permuted)?);
    let identical = a
        .params
        .iter()
        .zip(&b.params)
        .all(|(x, y)| x.flat_values().iter().map(|v| v.to_bits()).eq(y.flat_values().iter().map(|v| v.to_bits())));
    let base = l.base();
    let la = base.loss(a.last(), &ep.target)?.item()?;
    let lb = base.loss(b.last(), &permuted.target)?.item()?;
    Ok((
        identical && la != lb,
        format!("fast weights bit-identical under label permutation: {identical}; outer loss {la:.4} vs {lb:.4}"),
    ))
}

fn batch_size_one_normalization() -> Outcome {
    let fam = GlyphsSpec::default().build(5)?;
    let arch = Arch::LowEnd(LowEndSpec::conv(1, 14, 14, 5));
    let theta = arch.init_params(InitScheme::FaninUniform, 1)?;
    let mut stats = arch.running_stats(0.99);
    let ep = fam.sample_episode(Split::Train, 0, 7, 1, 1)?;
    let (_, moments) = arch.forward_collect(&theta, &ep.support.x, &stats)?;
    stats.absorb(&moments)?;
    let together = arch.forward(&theta, &ep.target.x, &stats)?;
    let d = fam.sample_len();
    let mut worst: f64 = 0.0;
    for i in 0..7 {
        let one = Tensor::constant(&[1, 1, 14, 14], ep.target.x.data()[i * d..(i + 1) * d].to_vec())?;
        let alone = arch.forward(&theta, &one, &stats)?;
        for c in 0..5 {
            worst = worst.max((alone.data()[c] - together.data()[i * 5 + c]).abs());
        }
    }
    Ok((worst <= BATCH_TOL, format!("max |alone - in batch of 7| {worst:.1e} (tol 1e-12)")))
}

fn highend_partial_adaptation() -> Outcome {
    let fam = GlyphsSpec::default().build(2)?;
    let arch = Arch::HighEnd(HighEndSpec::new(1, 14, 14, 3, 4));
    let mut cfg = MetaConfig::new(2, 1, Variant::ScaPred);
    cfg.critic_kernels = 1;
    cfg.lslr_init = 0.1;
    let l = MetaLearner::new(arch, cfg, InitScheme::XavierExceptLast, 6, 0)?;
    let last_unit = format!("{}.", HighEndSpec::unit_prefix(1, 1));
    let expected: Vec<String> = l
        .theta
        .names()
        .filter(|n| n.starts_with(&last_unit) || n.starts_with("head."))
        .map(String::from)
        .collect();
    let partition_ok = l.theta.adapted_names() == expected;
    let ep = fam.sample_episode(Split::Train, 0, 3, 1, 2)?;
    let traj = l.adapt(&l.theta.to_vars(), &l.lslr.to_vars(), &l.critic.to_vars(), &ep, false, true)?;
    let mut shared_moved = 0;
    for point in &traj.params[1..] {
        for name in l.theta.shared_names() {
            if point.get(&name)?.data() != l.theta.get(&name)?.data() {
                shared_moved += 1;
            }
        }
    }
    Ok((
        partition_ok && shared_moved == 0,
        format!(
            "adapted = {{{last_unit}*, head.*}} ({} tensors): {partition_ok}; shared tensors changed over {} inner steps: {shared_moved}",
            expected.len(),
            traj.params.len() - 1
        ),
    ))
}

fn benchmark() -> Outcome {
    let out = tempfile::tempdir()?;
    let start = Instant::now();
    let mut results = Vec::new();
    for variant in ["maml_pp", "sca_pred"] {
        let mut s = Settings::default();
        for (k, v) in [
            ("run.name", variant),
            ("run.seeds", "0,1,2"),
            ("task.family", "gaussian_blobs"),
            ("episode.way", "5"),
            ("episode.shot", "1"),
            ("episode.query", "3"),
            ("train.epochs", "3"),
            ("train.steps_per_epoch", "50"),
            ("train.val_episodes", "20"),
            ("train.test_episodes", "100"),
            ("meta.variant", variant),
            ("meta.critic_outer_step", "1e-2"),
        ] {
            s.set(k, v)?;
        }
        s.set("run.out", &out.path().display().to_string())?;
        results.push(run_experiment(&ExperimentConfig::resolve(s)?)?);
    }
    let took = start.elapsed();
    let (maml, sca) = (&results[0], &results[1]);
    let wins = maml.accuracies.iter().zip(&sca.accuracies).filter(|(m, s)| s >= m).count();
    let min_grad_w = sca.seeds.iter().map(|s| s.min_critic_grad_norm).fold(f64::INFINITY, f64::min);
    let ok = maml.mean > BENCH_MIN_MAML && wins >= 2 && min_grad_w > 0.0 && took <= BENCH_BUDGET;
    let pct = |v: &[f64]| v.iter().map(|a| format!("{:.1}", 100.0 * a)).collect::<Vec<_>>().join("/");
    Ok((
        ok,
        format!(
            "maml_pp {} (mean {:.1}%, need > 60%), sca_pred {} (mean {:.1}%), sca >= maml in {wins}/3 seeds (need 2), \
             min ||grad W|| {min_grad_w:.1e}, {:.0}s (budget 900s)",
            pct(&maml.accuracies),
            100.0 * maml.mean,
            pct(&sca.accuracies),
            100.0 * sca.mean,
            took.as_secs_f64()
        ),
    ))
}

fn statistics() -> Outcome {
    let ci = ci95(&[0.0, 1.0])?;
    let cell = format_cell(0.5538, Some(0.0039));
    let mut stop = EarlyStopper::new(10)?;
    // Frozen validation: improves through epoch 3, flat afterwards.
    let val = |epoch: usize| if epoch <= 3 { epoch as f64 / 10.0 } else { 0.3 };
    let mut stopped = None;
    for epoch in 1..=40 {
        stop.observe(epoch, val(epoch));
        if stop.should_stop(epoch) {
            stopped = Some(epoch);
            break;
        }
    }
    let best = stop.best_epoch();
    let ok = ci == 0.98 && cell == "55.38 ± 0.39%" && best == Some(3) && stopped == Some(13);
    Ok((ok, format!("ci95([0,1]) = {ci}, cell \"{cell}\", best epoch {best:?}, stopped at {stopped:?} (expect 13)")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradcheck suite", gradcheck_suite),
        ("reduction equivalence", reduction_equivalence),
        ("critic shape laws", critic_shape_laws),
        ("memory estimator", memory_estimator),
        ("multi-step loss", multi_step_loss),
        ("label hygiene", label_hygiene),
        ("batch-size-1 normalization", batch_size_one_normalization),
        ("high-end partial adaptation", highend_partial_adaptation),
        ("desk-scale benchmark", benchmark),
        ("statistics", statistics),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = check().unwrap_or_else(|e| (false, format!("error: {e:#}")));
        failures += usize::from(!ok);
        println!("[{}] {:>2}. {name}: {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
