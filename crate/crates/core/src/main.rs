use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use metacritic::harness::{self, gradcheck, ExperimentConfig, ReportFormat, Settings};
use metacritic::networks::estimate_critic_memory;

#[derive(Parser)]
#[command(name = "metacritic", version, about = "Few-shot meta-learning with a learned critic loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and test an experiment over its configured seeds.
    Run {
        /// Flat `section.key = value` config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key, e.g. `--set meta.variant=sca_pred`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run this single seed instead of `run.seeds`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `run.out`; the environment variable takes precedence).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "table")]
        format: String,
    },
    /// Finite-difference checks of every primitive and the critic-driven outer loss.
    Gradcheck {
        #[arg(long)]
        json: bool,
    },
    /// Bytes needed by the square first critic layer on flattened parameters.
    EstimateMemory {
        #[arg(long)]
        params: u64,
        #[arg(long, default_value_t = 4)]
        bytes: u64,
    },
    /// Write a synthetic family to an episode corpus file.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render stored `result.json` records.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value = "table")]
        format: String,
    },
}

fn settings(config: Option<&PathBuf>, overrides: &[String]) -> anyhow::Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        s.parse_text(&text, &path.display().to_string())?;
    }
    for o in overrides {
        s.apply_override(o)?;
    }
    Ok(s)
}

fn human_bytes(b: u128) -> String {
    let units = ["B", "kB", "MB", "GB", "TB", "PB", "EB"];
    let mut v = b as f64;
    let mut i = 0;
    while v >= 1000.0 && i + 1 < units.len() {
        v /= 1000.0;
        i += 1;
    }
    format!("{v:.1} {}", units[i])
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            overrides,
            seed,
            out,
            format,
        } => {
            let format: ReportFormat = format.parse()?;
            let mut s = settings(config.as_ref(), &overrides)?;
            if let Some(seed) = seed {
                s.set("run.seeds", &seed.to_string())?;
            }
            if let Some(out) = out {
                s.set("run.out", &out.display().to_string())?;
            }
            let cfg = ExperimentConfig::resolve(s)?;
            let result = harness::run_experiment(&cfg)?;
            print!("{}", harness::emit_report(&[result], format)?);
            eprintln!("results written to {}", cfg.run_dir().display());
        }
        Command::Gradcheck { json } => {
            let entries = gradcheck::full_suite()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&entries)?);
            } else {
                for e in &entries {
                    println!(
                        "{:<28} coords={:<4} max_rel_err={:.3e} tol={:.0e} {}",
                        e.name,
                        e.coordinates,
                        e.max_rel_err,
                        e.tolerance,
                        if e.passes() { "ok" } else { "FAIL" }
                    );
                }
            }
            let failed: Vec<&str> = entries.iter().filter(|e| !e.passes()).map(|e| e.name.as_str()).collect();
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
        Command::EstimateMemory { params, bytes } => {
            let total = estimate_critic_memory(params, bytes)?;
            println!("{total} bytes (≈ {})", human_bytes(total));
        }
        Command::GenCorpus { config, overrides, out } => {
            let cfg = ExperimentConfig::resolve(settings(config.as_ref(), &overrides)?)?;
            let family = cfg.build_family()?;
            family.write_episode_file(&out)?;
            eprintln!(
                "wrote {} classes ({}) to {}",
                family.classes.len(),
                family.origin,
                out.display()
            );
        }
        Command::Report { files, format } => {
            let format: ReportFormat = format.parse()?;
            let mut results = Vec::new();
            for f in &files {
                let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
                results.extend(harness::load_results(&text).with_context(|| format!("parsing {}", f.display()))?);
            }
            print!("{}", harness::emit_report(&results, format)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
