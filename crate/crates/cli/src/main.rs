//! `relcon`: dataset checks, world generation, training, evaluation, sweeps,
//! significance tests and reports.
//!
//! Exit codes: 0 success, 2 validation error (bad config, flags or inputs),
//! 1 runtime error.

mod config;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use relcon::dataset::{is_one_to_one, load_relations};
use relcon::eval::SweepAxis;
use relcon::stats::{two_proportion_z, ProportionSample};
use relcon::store::save_world;
use relcon::synthworld::{generate, generate_for_relations, SynthSpec};

use crate::config::{parse_seeds, ExperimentConfig, Overrides};

pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "relcon",
    version,
    about = "Linear relational concepts on toy and exported models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds; overrides the config and RELCON_SEED.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset checks.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Synthetic worlds.
    World {
        #[command(subcommand)]
        action: WorldCmd,
    },
    /// Train concept catalogs for every seed and method.
    Train(ConfigArgs),
    /// Evaluate trained catalogs; writes eval.csv, eval_summary.csv and eval_report.json.
    Eval(ConfigArgs),
    /// Train and evaluate over a grid of one setting.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        /// `a,b,c` or `start:stop:step` (inclusive).
        #[arg(long)]
        grid: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Two-proportion Z-test.
    Ztest {
        /// successes,trials
        #[arg(long)]
        a: String,
        /// successes,trials
        #[arg(long)]
        b: String,
    },
    /// Summary tables and plots from a run directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Omit generation metadata so repeated runs give identical files.
        #[arg(long)]
        deterministic: bool,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Validate { path: PathBuf },
}

#[derive(Subcommand)]
enum WorldCmd {
    Generate {
        /// SynthSpec JSON file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Plant the world over these relations instead of generated ones.
        #[arg(long)]
        relations: Option<PathBuf>,
    },
}

fn validation<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Validation)
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let seeds = a
        .seeds
        .as_deref()
        .map(parse_seeds)
        .transpose()
        .context("--seeds");
    let overrides = Overrides {
        seeds: validation(seeds)?,
        output_dir: a.output_dir.clone(),
        rank: a.rank,
        beta: a.beta,
    };
    validation(ExperimentConfig::load(&a.config, &overrides))
}

fn parse_counts(flag: &str, s: &str) -> anyhow::Result<ProportionSample> {
    let (succ, trials) = s
        .split_once(',')
        .ok_or_else(|| anyhow!("--{flag} expects successes,trials, got {s:?}"))?;
    let n = |x: &str| {
        x.trim()
            .parse::<u64>()
            .with_context(|| format!("--{flag}: {x:?}"))
    };
    ProportionSample::new(n(succ)?, n(trials)?).with_context(|| format!("--{flag}"))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Dataset {
            action: DatasetCmd::Validate { path },
        } => {
            let rels =
                validation(load_relations(&path).with_context(|| path.display().to_string()))?;
            println!("OK: {} relations", rels.len());
            for r in &rels {
                let note = if is_one_to_one(&r.samples) {
                    "  (one-to-one)"
                } else {
                    ""
                };
                println!(
                    "  {}: {} samples, {} objects{note}",
                    r.name,
                    r.samples.len(),
                    r.objects().len()
                );
            }
        }
        Command::World {
            action:
                WorldCmd::Generate {
                    spec,
                    out,
                    relations,
                },
        } => {
            let text = validation(
                std::fs::read_to_string(&spec).with_context(|| spec.display().to_string()),
            )?;
            let s: SynthSpec = validation(
                serde_json::from_str(&text).with_context(|| spec.display().to_string()),
            )?;
            let rels = relations
                .map(|p| load_relations(&p).with_context(|| p.display().to_string()))
                .transpose();
            let rels = validation(rels)?;
            let w = match rels {
                Some(r) => generate_for_relations(&r, &s),
                None => generate(&s),
            };
            let w = w.map_err(|e| match e {
                relcon::Error::InvalidArgument(_) | relcon::Error::ModelConfig(_) => {
                    Failure::Validation(e.into())
                }
                e => Failure::Runtime(e.into()),
            })?;
            save_world(&out, &w).map_err(|e| Failure::Runtime(e.into()))?;
            println!(
                "world with {} relations written to {} (memorization {:.3})",
                w.relations.len(),
                out.display(),
                w.memorization
            );
        }
        Command::Train(a) => {
            let cfg = load_config(&a)?;
            run::train(&cfg)?;
            println!(
                "trained {} seed(s) into {}",
                cfg.seeds.len(),
                cfg.output_dir.display()
            );
        }
        Command::Eval(a) => {
            let cfg = load_config(&a)?;
            let reports = run::eval(&cfg)?;
            for r in &reports {
                for m in &r.methods {
                    let c = m
                        .relation_weighted
                        .causality
                        .map(|c| format!(" causality {c:.3}"))
                        .unwrap_or_default();
                    println!(
                        "seed {} {}: accuracy {:.3}{c} over {} relations ({} test prompts)",
                        r.seed,
                        m.method,
                        m.relation_weighted.accuracy,
                        m.per_relation.len(),
                        m.pooled.trials
                    );
                }
            }
        }
        Command::Sweep { axis, grid, config } => {
            let cfg = load_config(&config)?;
            let rows = run::run_sweep(&cfg, axis, grid.as_deref())?;
            for r in &rows {
                println!(
                    "{} = {} {}: accuracy {:.3} ± {:.3}",
                    axis.name(),
                    r.value,
                    r.method,
                    r.accuracy.mean,
                    r.accuracy.std
                );
            }
        }
        Command::Ztest { a, b } => {
            let a = validation(parse_counts("a", &a))?;
            let b = validation(parse_counts("b", &b))?;
            let t = two_proportion_z(a, b).map_err(|e| Failure::Validation(e.into()))?;
            println!("z = {:.4}", t.z);
            println!("p = {:.3e}", t.p_two_sided);
            if t.degenerate {
                println!("(pooled proportion is 0 or 1; test undefined)");
            }
        }
        Command::Report {
            runs,
            out,
            deterministic,
        } => {
            let files = report::report(&runs, &out, deterministic).map_err(Failure::Runtime)?;
            for f in files {
                println!("{}", out.join(f).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Validation(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
