//! Experiment drivers behind the command line: single runs, side-by-side
//! comparisons and resumable parameter sweeps. Every run writes
//! `trace.csv`, `timing.csv` and `metrics.json` into its own directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_loop::{metrics, run_episode, EpisodeError, MetricsReport};
use crate::config::{BuildError, ConfigError, ExperimentConfig};
use crate::mpc::{MpcController, MpcError};
use crate::network::LossProcess;
use crate::plant::{MultiHorizonSpec, TruthPlant};

pub const TRACE_FILE: &str = "trace.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("seed {seed}: {source}")]
    Episode { seed: u64, source: EpisodeError },
    #[error("variants do not share a plant: {0}")]
    Mismatch(String),
    #[error("invalid sweep axis `{0}`")]
    Axis(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl ExperimentError {
    /// 1 for configuration problems, 3 for everything the user cannot fix in
    /// the config file. Episode failures that complete a trace are reported
    /// through the metrics, not here.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Mismatch(_) | ExperimentError::Axis(_) => 1,
            ExperimentError::Build(BuildError::Config(_)) => 1,
            ExperimentError::Build(_) => 3,
            ExperimentError::Episode { source, .. } => match source {
                EpisodeError::Config(_) => 1,
                EpisodeError::InitialInfeasible | EpisodeError::Mpc(MpcError::Infeasible) => 2,
                _ => 3,
            },
            ExperimentError::Io { .. } | ExperimentError::Json { .. } => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A controller and truth plant ready to run episodes.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub controller: MpcController,
    pub plant: TruthPlant,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<Self, ExperimentError> {
        config.validate()?;
        let ocp = config.build_ocp(cache_dir)?;
        let plant = config.truth_plant(&ocp.model);
        Ok(Prepared {
            config: config.clone(),
            controller: config.controller(ocp),
            plant,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.controller.ocp.layout().n_vars()
    }

    /// Run one seed and write its three output files into `dir`.
    pub fn run_seed(&self, seed: u64, dir: &Path) -> Result<MetricsReport, ExperimentError> {
        let episode = self.config.episode(seed)?;
        let trace = run_episode(&self.controller, &self.plant, &episode)
            .map_err(|source| ExperimentError::Episode { seed, source })?;
        let report = metrics(&trace);
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write(&dir.join(TRACE_FILE), &trace.to_csv())?;
        write(&dir.join(TIMING_FILE), &trace.timing_csv())?;
        let json = serde_json::to_string_pretty(&report).expect("metrics serialize");
        write(&dir.join(METRICS_FILE), &(json + "\n"))?;
        Ok(report)
    }
}

fn write(path: &Path, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn sets_dir(out: &Path) -> PathBuf {
    out.join("sets")
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// One episode per seed, written to `<out>/seed-<seed>/`.
pub fn run(config: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<Vec<MetricsReport>, ExperimentError> {
    let prepared = Prepared::new(config, Some(&sets_dir(out)))?;
    seeds.iter().map(|&s| prepared.run_seed(s, &seed_dir(out, s))).collect()
}

/// Per-variant means over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub horizon: String,
    pub n: usize,
    pub ts: f64,
    /// Unknown for sweep points restored entirely from disk.
    pub n_vars: Option<usize>,
    pub seeds: usize,
    pub successes: usize,
    pub mse: f64,
    pub uplink_loss_pct: f64,
    pub downlink_loss_pct: f64,
    pub mean_solve_ms: f64,
    pub uplink_bytes_per_s: f64,
    pub downlink_bytes_per_s: f64,
    pub downlink_packets: f64,
}

impl SummaryRow {
    pub fn from_reports(label: &str, config: &ExperimentConfig, n_vars: Option<usize>, reports: &[MetricsReport]) -> Self {
        let mean = |f: &dyn Fn(&MetricsReport) -> f64| {
            if reports.is_empty() {
                0.0
            } else {
                reports.iter().map(f).sum::<f64>() / reports.len() as f64
            }
        };
        SummaryRow {
            label: label.to_string(),
            horizon: config.horizon.label(),
            n: config.n,
            ts: config.model.ts(),
            n_vars,
            seeds: reports.len(),
            successes: reports.iter().filter(|r| r.success).count(),
            mse: mean(&|r| r.mse),
            uplink_loss_pct: mean(&|r| r.uplink_loss_pct),
            downlink_loss_pct: mean(&|r| r.downlink_loss_pct),
            mean_solve_ms: mean(&|r| r.mean_solve_time * 1e3),
            uplink_bytes_per_s: mean(&|r| r.uplink_bytes_per_s),
            downlink_bytes_per_s: mean(&|r| r.downlink_bytes_per_s),
            downlink_packets: mean(&|r| r.downlink_packets as f64),
        }
    }
}

const SUMMARY_HEADER: [&str; 14] = [
    "label",
    "horizon",
    "n",
    "ts",
    "n_vars",
    "seeds",
    "successes",
    "mse",
    "uplink_loss_pct",
    "downlink_loss_pct",
    "mean_solve_ms",
    "uplink_bytes_per_s",
    "downlink_bytes_per_s",
    "downlink_packets",
];

fn summary_cells(r: &SummaryRow) -> Vec<String> {
    vec![
        r.label.clone(),
        r.horizon.clone(),
        r.n.to_string(),
        r.ts.to_string(),
        r.n_vars.map_or_else(|| "-".to_string(), |v| v.to_string()),
        r.seeds.to_string(),
        r.successes.to_string(),
        format!("{:.6}", r.mse),
        format!("{:.2}", r.uplink_loss_pct),
        format!("{:.2}", r.downlink_loss_pct),
        format!("{:.4}", r.mean_solve_ms),
        format!("{:.1}", r.uplink_bytes_per_s),
        format!("{:.1}", r.downlink_bytes_per_s),
        format!("{:.1}", r.downlink_packets),
    ]
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = SUMMARY_HEADER.join(",") + "\n";
    for r in rows {
        out += &(summary_cells(r).join(",") + "\n");
    }
    out
}

/// Column-aligned text rendering of the summary.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let cells: Vec<Vec<String>> = rows.iter().map(summary_cells).collect();
    let widths: Vec<usize> = (0..SUMMARY_HEADER.len())
        .map(|c| cells.iter().map(|r| r[c].len()).chain([SUMMARY_HEADER[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, row: &[String]| {
        let padded: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, &SUMMARY_HEADER.map(String::from));
    for r in &cells {
        line(&mut out, r);
    }
    out
}

fn variant_label(config: &ExperimentConfig, index: usize) -> String {
    config.label.clone().unwrap_or_else(|| format!("v{index}"))
}

/// Run every variant (all seeds) and write `summary.csv` / `summary.txt`.
pub fn compare(variants: &[ExperimentConfig], out: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let Some(first) = variants.first() else {
        return Err(ExperimentError::Mismatch("no variants given".into()));
    };
    for (i, v) in variants.iter().enumerate().skip(1) {
        if !v.model.same_plant(&first.model) || v.plant != first.plant {
            return Err(ExperimentError::Mismatch(format!(
                "{} differs from {}",
                variant_label(v, i),
                variant_label(first, 0)
            )));
        }
    }
    let mut labels: Vec<String> = variants.iter().enumerate().map(|(i, v)| variant_label(v, i)).collect();
    for i in 0..labels.len() {
        if labels[..i].contains(&labels[i]) {
            labels[i] = format!("{}-{i}", labels[i]);
        }
    }
    let mut rows = Vec::new();
    for (v, label) in variants.iter().zip(&labels) {
        let dir = out.join(label);
        let prepared = Prepared::new(v, Some(&sets_dir(out)))?;
        let reports = v
            .seeds
            .iter()
            .map(|&s| prepared.run_seed(s, &seed_dir(&dir, s)))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(SummaryRow::from_reports(label, v, Some(prepared.n_vars()), &reports));
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write(&out.join("summary.csv"), &summary_csv(&rows))?;
    write(&out.join("summary.txt"), &summary_table(&rows))?;
    Ok(rows)
}

/// One sweep dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum Axis {
    N(Vec<usize>),
    Horizon(Vec<MultiHorizonSpec>),
    /// Bernoulli loss probability applied to both links.
    LossP(Vec<f64>),
}

impl FromStr for Axis {
    type Err = ExperimentError;

    /// `n=1,2,3`, `H=5-4-3-2,30` or `p=0,0.3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ExperimentError::Axis(s.to_string());
        let (name, values) = s.split_once('=').ok_or_else(bad)?;
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if items.is_empty() {
            return Err(bad());
        }
        match name.trim() {
            "n" => items.iter().map(|v| v.parse().map_err(|_| bad())).collect::<Result<_, _>>().map(Axis::N),
            "H" | "h" | "horizon" => items
                .iter()
                .map(|v| {
                    let layout: Vec<usize> = v.split('-').map(|h| h.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
                    MultiHorizonSpec::try_from(layout).map_err(|_| bad())
                })
                .collect::<Result<_, _>>()
                .map(Axis::Horizon),
            "p" => items.iter().map(|v| v.parse().map_err(|_| bad())).collect::<Result<_, _>>().map(Axis::LossP),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    /// Relative output directory; empty for a sweep without axes.
    pub name: String,
    pub config: ExperimentConfig,
}

/// Cartesian product of the axes applied to `base`. Points that fail
/// validation (e.g. `n > h₁`) are reported as configuration errors.
pub fn sweep_plan(base: &ExperimentConfig, axes: &[Axis]) -> Result<Vec<SweepPoint>, ExperimentError> {
    let mut points = vec![SweepPoint {
        name: String::new(),
        config: base.clone(),
    }];
    for axis in axes {
        let mut next = Vec::new();
        for p in &points {
            let join = |part: String| if p.name.is_empty() { part } else { format!("{}_{part}", p.name) };
            match axis {
                Axis::N(values) => {
                    for &n in values {
                        let mut c = p.config.clone();
                        c.n = n;
                        next.push(SweepPoint { name: join(format!("n={n}")), config: c });
                    }
                }
                Axis::Horizon(values) => {
                    for h in values {
                        let mut c = p.config.clone();
                        c.horizon = h.clone();
                        next.push(SweepPoint {
                            name: join(format!("H={}", h.label())),
                            config: c,
                        });
                    }
                }
                Axis::LossP(values) => {
                    for &prob in values {
                        let mut c = p.config.clone();
                        c.links.uplink = LossProcess::Bernoulli { p: prob };
                        c.links.downlink = LossProcess::Bernoulli { p: prob };
                        next.push(SweepPoint {
                            name: join(format!("p={prob}")),
                            config: c,
                        });
                    }
                }
            }
        }
        points = next;
    }
    for p in &points {
        p.config.validate()?;
    }
    Ok(points)
}

#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub name: String,
    pub reports: Vec<MetricsReport>,
    /// Seeds whose `metrics.json` already existed.
    pub skipped: usize,
    pub n_vars: Option<usize>,
}

/// Run the seeds of one point that have no `metrics.json` yet. The set cache
/// is shared across points under `<out>/sets`.
pub fn run_point(point: &SweepPoint, out: &Path) -> Result<PointOutcome, ExperimentError> {
    let dir = out.join(&point.name);
    let mut prepared = None;
    let mut reports = Vec::new();
    let mut skipped = 0;
    for &seed in &point.config.seeds {
        let sdir = seed_dir(&dir, seed);
        let existing = sdir.join(METRICS_FILE);
        if existing.exists() {
            reports.push(read_metrics(&existing)?);
            skipped += 1;
            continue;
        }
        if prepared.is_none() {
            prepared = Some(Prepared::new(&point.config, Some(&sets_dir(out)))?);
        }
        reports.push(prepared.as_ref().expect("prepared above").run_seed(seed, &sdir)?);
    }
    Ok(PointOutcome {
        name: point.name.clone(),
        reports,
        skipped,
        n_vars: prepared.as_ref().map(Prepared::n_vars),
    })
}

/// Sequential sweep; callers wanting parallelism map `run_point` themselves.
pub fn sweep(base: &ExperimentConfig, axes: &[Axis], out: &Path) -> Result<Vec<PointOutcome>, ExperimentError> {
    sweep_plan(base, axes)?.iter().map(|p| run_point(p, out)).collect()
}

/// Summary rows for finished sweep points (one per point, means over seeds).
pub fn sweep_summary(points: &[SweepPoint], outcomes: &[PointOutcome]) -> Vec<SummaryRow> {
    points
        .iter()
        .zip(outcomes)
        .map(|(p, o)| {
            let label = if p.name.is_empty() { "base" } else { p.name.as_str() };
            SummaryRow::from_reports(label, &p.config, o.n_vars, &o.reports)
        })
        .collect()
}
