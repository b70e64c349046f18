use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use netmpc::config::ExperimentConfig;
use netmpc::experiment::{self, Axis, ExperimentError, PointOutcome};
use rayon::prelude::*;

/// Bandwidth-aware tracking MPC over simulated lossy links.
#[derive(Parser)]
#[command(name = "netmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode per seed; writes trace.csv, timing.csv, metrics.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several variants of one plant and tabulate them.
    Compare {
        /// Repeat once per variant.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cartesian sweep, skipping runs whose metrics already exist.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `n=1,2,3`, `H=5-4-3-2,30` or `p=0,0.3`; repeatable.
        #[arg(long)]
        axis: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Build (or load) the admissible set and report its size.
    SetsCache {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn out_dir(out: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    out.or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn failures<'a>(reports: impl IntoIterator<Item = &'a netmpc::closed_loop::MetricsReport>) -> usize {
    reports.into_iter().filter(|r| !r.success).count()
}

fn execute(command: Command) -> Result<u8, ExperimentError> {
    match command {
        Command::Run { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let out = out_dir(out, &cfg);
            let reports = experiment::run(&cfg, &out, &cfg.seeds)?;
            for r in &reports {
                println!(
                    "seed {}: {} mse={:.6} up_loss={:.1}% down_loss={:.1}% solve={:.3}ms",
                    r.seed,
                    if r.success { "ok" } else { "FAILED" },
                    r.mse,
                    r.uplink_loss_pct,
                    r.downlink_loss_pct,
                    r.mean_solve_time * 1e3
                );
            }
            Ok(if failures(&reports) > 0 { 2 } else { 0 })
        }
        Command::Compare { config, out, seed } => {
            let variants = config
                .iter()
                .map(|p| {
                    let mut c = load(p, seed)?;
                    if c.label.is_none() {
                        c.label = p.file_stem().map(|s| s.to_string_lossy().into_owned());
                    }
                    Ok(c)
                })
                .collect::<Result<Vec<_>, ExperimentError>>()?;
            let out = out_dir(out, &variants[0]);
            let rows = experiment::compare(&variants, &out)?;
            print!("{}", experiment::summary_table(&rows));
            Ok(if rows.iter().any(|r| r.successes < r.seeds) { 2 } else { 0 })
        }
        Command::Sweep {
            config,
            axis,
            out,
            seed,
            jobs,
        } => {
            let cfg = load(&config, seed)?;
            let out = out_dir(out, &cfg);
            let axes = axis.iter().map(|a| a.parse()).collect::<Result<Vec<Axis>, _>>()?;
            let points = experiment::sweep_plan(&cfg, &axes)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .map_err(|e| ExperimentError::Io {
                    path: "thread pool".into(),
                    source: std::io::Error::other(e),
                })?;
            let outcomes: Vec<PointOutcome> =
                pool.install(|| points.par_iter().map(|p| experiment::run_point(p, &out)).collect::<Result<_, _>>())?;
            let skipped: usize = outcomes.iter().map(|o| o.skipped).sum();
            let rows = experiment::sweep_summary(&points, &outcomes);
            std::fs::create_dir_all(&out).map_err(|source| ExperimentError::Io {
                path: out.display().to_string(),
                source,
            })?;
            let summary = out.join("summary.csv");
            std::fs::write(&summary, experiment::summary_csv(&rows)).map_err(|source| ExperimentError::Io {
                path: summary.display().to_string(),
                source,
            })?;
            print!("{}", experiment::summary_table(&rows));
            if skipped > 0 {
                println!("{skipped} run(s) already present, skipped");
            }
            let failed = failures(outcomes.iter().flat_map(|o| &o.reports));
            Ok(if failed > 0 { 2 } else { 0 })
        }
        Command::SetsCache { config, out } => {
            let cfg = load(&config, None)?;
            let out = out_dir(out, &cfg);
            let dir = experiment::sets_dir(&out);
            let ocp = cfg.build_ocp(Some(&dir))?;
            let key = cfg.sets_key(&ocp.model)?;
            println!("key       {key}");
            println!("file      {}", dir.join(format!("{key}.json")).display());
            println!("horizon   {}", ocp.spec.label());
            println!("k*        {}", ocp.oinf.k_star);
            println!("lambda    {}", ocp.oinf.lambda);
            println!("rows      {}", ocp.oinf.set.n_rows());
            println!("x02 rows  {}", ocp.x02.n_rows());
            println!("qp vars   {}", ocp.layout().n_vars());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
