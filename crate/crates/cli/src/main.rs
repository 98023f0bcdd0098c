use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracer_core::harness::{environment_for_run, monte_carlo, random_walk_baseline, run_search, solve_field};
use tracer_core::lattice::EnvironmentFile;
use tracer_core::{CompleteGrid, EnvironmentMap, ExperimentSummary, NodeCoord, RunRecord, SearchConfig};

/// Source search on obstructed lattices: environments, ground-truth fields,
/// single searches and Monte Carlo batches.
#[derive(Parser, Debug)]
#[command(name = "tracer", version)]
struct Cli {
    /// JSON file with search configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for environments and runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for batches.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Source node as `x,y`.
    #[arg(long, global = true, value_parser = parse_node)]
    source: Option<NodeCoord>,
    /// True release rate A0.
    #[arg(long, global = true)]
    a0: Option<f64>,
    /// Fraction of links removed.
    #[arg(long, global = true)]
    removal_fraction: Option<f64>,
    #[arg(long, global = true)]
    particles: Option<usize>,
    /// Hypothetical counts per control.
    #[arg(long, global = true)]
    reward_samples: Option<usize>,
    #[arg(long, global = true)]
    max_steps: Option<usize>,
    /// Reuse one environment across batch runs.
    #[arg(long, global = true)]
    pin_environment: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a random environment as JSON.
    GenEnv,
    /// Write the ground-truth field of an environment as CSV.
    SolveField {
        /// Environment JSON; generated from the seed when absent.
        #[arg(long)]
        env: Option<PathBuf>,
    },
    /// Run one search and write its record and step log.
    Run {
        #[arg(long)]
        env: Option<PathBuf>,
    },
    /// Monte Carlo batch of searches.
    Mc {
        #[arg(long, default_value_t = 100)]
        runs: usize,
    },
    /// Monte Carlo batch of random-walk searches.
    Baseline {
        #[arg(long, default_value_t = 100)]
        runs: usize,
    },
}

fn parse_node(s: &str) -> Result<NodeCoord, String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected x,y, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<i32>().map_err(|e| format!("{v:?}: {e}"));
    Ok(NodeCoord::new(parse(x)?, parse(y)?))
}

fn load_config(cli: &Cli) -> Result<SearchConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SearchConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.env_seed = seed;
        cfg.run_seed = seed;
    }
    let o = &cli.overrides;
    if let Some(v) = o.source {
        cfg.source = v;
    }
    if let Some(v) = o.a0 {
        cfg.release_rate = v;
    }
    if let Some(v) = o.removal_fraction {
        cfg.removal_fraction = v;
    }
    if let Some(v) = o.particles {
        cfg.particles = v;
    }
    if let Some(v) = o.reward_samples {
        cfg.reward_samples = v;
    }
    if let Some(v) = o.max_steps {
        cfg.max_steps = v;
    }
    cfg.pin_environment |= o.pin_environment;
    cfg.validate()?;
    Ok(cfg)
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = out.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: serde::Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(out, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn environment(cfg: &SearchConfig, path: Option<&Path>) -> Result<EnvironmentMap> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let file: EnvironmentFile =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            if file.radius != cfg.radius {
                bail!(
                    "environment radius {} differs from configured {}",
                    file.radius,
                    cfg.radius
                );
            }
            Ok(EnvironmentMap::from_file(&file)?)
        }
        None => Ok(environment_for_run(cfg, Arc::new(CompleteGrid::new(cfg.radius)?), 0)?),
    }
}

fn write_batch(out: &Path, prefix: &str, summary: &ExperimentSummary, records: &[RunRecord]) -> Result<()> {
    write_json(out, &format!("{prefix}summary.json"), summary)?;
    summary.write_runs_csv(create(out, &format!("{prefix}runs.csv"))?)?;
    let dir = out.join(format!("{prefix}steps"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for r in records {
        r.write_step_log(create(&dir, &format!("run_{:04}.jsonl", r.run_id))?)?;
    }
    Ok(())
}

fn report(summary: &ExperimentSummary) {
    let mean = summary
        .mean_steps
        .map_or_else(|| "n/a".to_string(), |m| format!("{m:.1}"));
    println!(
        "runs {} | success {:.1}% | mean steps {}",
        summary.runs, summary.success_rate, mean
    );
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    match &cli.command {
        Command::GenEnv => {
            let env = environment(&cfg, None)?;
            write_json(out, "env.json", &env.to_file())?;
            println!(
                "{} of {} links removed",
                env.removed_link_ids().len(),
                env.grid().link_count()
            );
        }
        Command::SolveField { env } => {
            let env = environment(&cfg, env.as_deref())?;
            let field = solve_field(&cfg, &env)?;
            field.write_csv(&env, create(out, "field.csv")?)?;
        }
        Command::Run { env } => {
            let env = environment(&cfg, env.as_deref())?;
            write_json(out, "env.json", &env.to_file())?;
            let record = run_search(&cfg, env, cfg.run_seed)?;
            write_json(out, "run.json", &record)?;
            record.write_step_log(create(out, "steps.jsonl")?)?;
            println!("{:?} after {} steps", record.outcome, record.steps_taken);
        }
        Command::Mc { runs } => {
            let (summary, records) = monte_carlo(&cfg, *runs, cli.workers)?;
            write_batch(out, "", &summary, &records)?;
            report(&summary);
        }
        Command::Baseline { runs } => {
            let (summary, records) = random_walk_baseline(&cfg, *runs, cli.workers)?;
            write_batch(out, "baseline_", &summary, &records)?;
            report(&summary);
        }
    }
    Ok(())
}
