use std::collections::{BTreeMap, BTreeSet};

use metacritic::harness::{
    ci95, emit_report, format_cell, load_results, run_experiment, run_seed, EarlyStopper, ExperimentConfig,
    ReportFormat, Settings,
};
use metacritic::metalearn::{MetaConfig, MetaLearner, Variant};
use metacritic::networks::checkpoint::Checkpoint;
use metacritic::networks::{Arch, InitScheme, LowEndSpec};
use metacritic::tasks::{BlobsSpec, GlyphsSpec, Split, TaskFamily};

fn settings(pairs: &[(&str, &str)]) -> Settings {
    let mut s = Settings::default();
    for (k, v) in pairs {
        s.set(k, v).unwrap();
    }
    s
}

/// A run small enough for the test suite.
fn quick(out: &std::path::Path, extra: &[(&str, &str)]) -> ExperimentConfig {
    let out = out.display().to_string();
    let mut pairs = vec![
        ("run.out", out.as_str()),
        ("run.seeds", "4"),
        ("task.dim", "6"),
        ("episode.way", "3"),
        ("episode.query", "2"),
        ("train.epochs", "3"),
        ("train.steps_per_epoch", "4"),
        ("train.val_episodes", "4"),
        ("train.test_episodes", "6"),
        ("model.blocks", "1"),
        ("meta.inner_steps", "2"),
        ("meta.critic_kernels", "2"),
    ];
    pairs.extend_from_slice(extra);
    ExperimentConfig::resolve(settings(&pairs)).unwrap()
}

#[test]
fn corpus_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for fam in [
        BlobsSpec::default().build(7).unwrap(),
        GlyphsSpec::default().build(7).unwrap(),
    ] {
        let path = dir.path().join(format!("{}.mcep", fam.origin));
        fam.write_episode_file(&path).unwrap();
        let back = TaskFamily::load_episode_file(&path).unwrap();
        assert_eq!(back.classes, fam.classes);
        assert_eq!(back.sample_shape, fam.sample_shape);
        let a = fam.sample_episode(Split::Test, 3, 5, 1, 4).unwrap();
        let b = back.sample_episode(Split::Test, 3, 5, 1, 4).unwrap();
        assert_eq!(a.support.x.data(), b.support.x.data());
        assert_eq!(a.target.y, b.target.y);
    }
}

#[test]
fn blobs_are_separable_by_nearest_prototype() {
    let fam = BlobsSpec::default().build(0).unwrap();
    let (mut hit, mut total) = (0, 0);
    for i in 0..40 {
        let ep = fam.sample_episode(Split::Test, i, 5, 5, 10).unwrap();
        let d = fam.sample_len();
        let mut protos = vec![vec![0.0; d]; 5];
        for (row, &y) in ep.support.y.iter().enumerate() {
            for (p, x) in protos[y].iter_mut().zip(&ep.support.x.data()[row * d..(row + 1) * d]) {
                *p += x / 5.0;
            }
        }
        for (row, &y) in ep.target.y.iter().enumerate() {
            let x = &ep.target.x.data()[row * d..(row + 1) * d];
            let dist = |p: &Vec<f64>| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..5).min_by(|&a, &b| dist(&protos[a]).total_cmp(&dist(&protos[b]))).unwrap();
            hit += usize::from(best == y);
            total += 1;
        }
    }
    let acc = hit as f64 / total as f64;
    assert!(acc > 0.95, "nearest-prototype accuracy {acc}");
}

#[test]
fn episodes_vary_their_label_assignment() {
    let fam = BlobsSpec::default().build(1).unwrap();
    let assignments: BTreeSet<Vec<String>> = (0..10)
        .map(|i| fam.sample_episode(Split::Train, i, 5, 1, 3).unwrap().classes)
        .collect();
    assert!(assignments.len() >= 2);
    // Same index, same episode.
    let a = fam.sample_episode(Split::Val, 4, 5, 1, 3).unwrap();
    let b = fam.sample_episode(Split::Val, 4, 5, 1, 3).unwrap();
    assert_eq!(a.classes, b.classes);
    assert_eq!(a.target.x.data(), b.target.x.data());
}

#[test]
fn splits_are_disjoint() {
    let fam = GlyphsSpec::default().build(3).unwrap();
    let ids = |s| fam.pool(s).iter().map(|c| c.id.clone()).collect::<BTreeSet<_>>();
    let (tr, va, te) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
}

#[test]
fn learner_checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let arch = Arch::LowEnd(LowEndSpec::mlp(6, 3, 1, 4));
    let mut cfg = MetaConfig::new(2, 1, Variant::ScaPred);
    cfg.critic_kernels = 2;
    let mut l = MetaLearner::new(arch.clone(), cfg.clone(), InitScheme::FaninUniform, 6, 2).unwrap();
    let fam = BlobsSpec {
        dim: 6,
        ..BlobsSpec::default()
    }
    .build(2)
    .unwrap();
    let batch: Vec<_> = (0..2).map(|i| fam.sample_episode(Split::Train, i, 3, 1, 2).unwrap()).collect();
    l.meta_step(&batch, 0).unwrap();

    let path = dir.path().join("l.ckpt");
    l.to_checkpoint(BTreeMap::from([("note".to_string(), "x".to_string())]))
        .save(&path)
        .unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.meta["note"], "x");
    let mut fresh = MetaLearner::new(arch, cfg, InitScheme::FaninUniform, 6, 99).unwrap();
    fresh.load_checkpoint(&ck).unwrap();
    assert_eq!(fresh.theta.flat_values(), l.theta.flat_values());
    assert_eq!(fresh.critic.flat_values(), l.critic.flat_values());
    assert_eq!(fresh.lslr.rates.flat_values(), l.lslr.rates.flat_values());
    assert_eq!(fresh.stats, l.stats);
}

#[test]
fn seed_runs_are_deterministic_apart_from_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), &[("meta.variant", "sca_pred")]);
    let fam = cfg.build_family().unwrap();
    let mut a = run_seed(&cfg, &fam, 4, None).unwrap();
    let mut b = run_seed(&cfg, &fam, 4, None).unwrap();
    a.wall_seconds = 0.0;
    b.wall_seconds = 0.0;
    assert_eq!(a, b);
    assert!(a.min_critic_grad_norm > 0.0);
}

#[test]
fn early_stop_matches_its_fixture() {
    // Validation improves until epoch 4, then stays flat.
    let scores = [0.2, 0.3, 0.35, 0.5, 0.5, 0.49, 0.5, 0.4, 0.45, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
    let mut stop = EarlyStopper::new(10).unwrap();
    let mut stopped_at = None;
    for (i, &s) in scores.iter().enumerate() {
        let epoch = i + 1;
        stop.observe(epoch, s);
        if stop.should_stop(epoch) {
            stopped_at = Some(epoch);
            break;
        }
    }
    assert_eq!(stop.best_epoch(), Some(4));
    assert_eq!(stopped_at, Some(14));
}

#[test]
fn training_stops_patience_epochs_after_the_best() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), &[("train.epochs", "6"), ("train.patience", "1")]);
    let fam = cfg.build_family().unwrap();
    let r = run_seed(&cfg, &fam, 1, None).unwrap();
    assert_eq!(r.epochs_run, (r.best_epoch + 1).min(6));
    assert_eq!(r.val_accuracy.len(), r.epochs_run);
}

#[test]
fn statistics_and_cells() {
    assert_eq!(ci95(&[0.0, 1.0]).unwrap(), 0.98);
    assert_eq!(format_cell(0.5538, Some(0.0039)), "55.38 ± 0.39%");
    let re = |s: &str| {
        let (m, rest) = s.split_once(" ± ").unwrap();
        m.parse::<f64>().is_ok() && rest.ends_with('%') && rest.trim_end_matches('%').parse::<f64>().is_ok()
    };
    assert!(re(&format_cell(0.1, Some(0.02))));
}

#[test]
fn experiment_writes_matching_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), &[("run.seeds", "0,1"), ("train.epochs", "1")]);
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.seeds.len(), 2);
    assert!(r.ci95.is_some());

    let run_dir = cfg.run_dir();
    let loaded = load_results(&std::fs::read_to_string(run_dir.join("result.json")).unwrap()).unwrap();
    assert_eq!(loaded, vec![r.clone()]);
    for s in &r.seeds {
        assert!(s.checkpoint.as_ref().unwrap().exists());
    }

    let csv_text = std::fs::read_to_string(run_dir.join("result.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let row = rdr.records().next().unwrap().unwrap();
    let field = |name: &str| row[headers.iter().position(|h| h == name).unwrap()].to_string();
    assert_eq!(field("mean").parse::<f64>().unwrap(), r.mean);
    assert_eq!(field("ci95").parse::<f64>().unwrap(), r.ci95.unwrap());
    let accs: Vec<f64> = field("accuracies").split(';').map(|a| a.parse().unwrap()).collect();
    assert_eq!(accs, r.accuracies);
    assert_eq!(field("variant"), r.variant);
    assert_eq!(emit_report(&loaded, ReportFormat::Csv).unwrap(), csv_text);
}

#[test]
fn single_seed_has_no_interval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), &[("train.epochs", "1")]);
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.ci95, None);
    assert!(emit_report(&[r], ReportFormat::Table).unwrap().contains('%'));
}

#[test]
fn configuration_errors_name_the_key() {
    let mut s = Settings::default();
    let err = s.set("meta.nope", "1").unwrap_err().to_string();
    assert!(err.contains("meta.nope"), "{err}");
    let err = s.parse_text("episode.way = 5\nbroken line\n", "cfg.txt").unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");
    s.set("episode.way", "500").unwrap();
    let cfg = ExperimentConfig::resolve(s).unwrap();
    assert!(run_experiment(&cfg).is_err());
}
