//! The networked loop: cloud estimator and rate-`n` controller, the smart
//! actuator with its consistency check, and trace collection.
//!
//! Slot `t` runs in this order:
//! 1. the downlink packet for `t` (sent only when `t mod n = 0`) arrives or
//!    not, the actuator checks consistency and applies `u_t`;
//! 2. the plant advances;
//! 3. when `(t+1) mod n = 0` the actuator sends `(x_t, s)` during `(t, t+1)`;
//! 4. the cloud updates its prediction `x̂_{t+1|t}` and, on the same slots,
//!    solves for the packet that arrives at `t+1`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::{MpcController, MpcError};
use crate::network::{measure_bytes, ControllerPacket, LinkConfig, Network, NetworkError, PlantPacket};
use crate::plant::{LtiModel, PlantError, TruthPlant};

/// Tolerance on the prediction gap at consistent steps (linear plant).
pub const CONSISTENCY_TOL: f64 = 1e-9;
/// Tolerance on normalized constraint rows when counting violations.
pub const VIOLATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid episode configuration: {0}")]
    Config(String),
    #[error("tracking problem infeasible at the initial state")]
    InitialInfeasible,
    #[error("QP backend failure at t = {t}")]
    Solver { t: i64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

/// Piecewise-constant reference; each segment holds from `start` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSegment {
    pub start: usize,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSchedule {
    segments: Vec<(usize, DVector<f64>)>,
}

impl ReferenceSchedule {
    pub fn constant(r: DVector<f64>) -> Self {
        ReferenceSchedule {
            segments: vec![(0, r)],
        }
    }

    pub fn new(segments: &[ReferenceSegment]) -> Result<Self, EpisodeError> {
        let mut segs: Vec<(usize, DVector<f64>)> = segments
            .iter()
            .map(|s| (s.start, DVector::from_vec(s.r.clone())))
            .collect();
        segs.sort_by_key(|s| s.0);
        if segs.first().map(|s| s.0) != Some(0) {
            return Err(EpisodeError::Config("reference schedule must start at t = 0".into()));
        }
        if segs.windows(2).any(|w| w[0].0 == w[1].0 || w[0].1.len() != w[1].1.len()) {
            return Err(EpisodeError::Config("reference segments overlap or differ in size".into()));
        }
        Ok(ReferenceSchedule { segments: segs })
    }

    pub fn at(&self, t: usize) -> &DVector<f64> {
        let idx = self.segments.partition_point(|s| s.0 <= t);
        &self.segments[idx.saturating_sub(1)].1
    }

    pub fn dim(&self) -> usize {
        self.segments[0].1.len()
    }
}

/// Input the actuator applies `offset` steps after the packet's slot.
pub fn plan_input(pkt: &ControllerPacket, offset: i64, x: &DVector<f64>, k: &DMatrix<f64>) -> DVector<f64> {
    match usize::try_from(offset) {
        Ok(i) if i < pkt.u_slice.len() => pkt.u_slice[i].clone(),
        _ => &pkt.ubar + k * (&pkt.xbar - x),
    }
}

/// `Θ_t` from the downlink history (indexed by slot, including `θ_t`).
pub fn consistency(q: i64, n: usize, theta_history: &[bool], t: i64) -> bool {
    let theta_at = |i: i64| usize::try_from(i).ok().and_then(|i| theta_history.get(i)).copied().unwrap_or(false);
    if !theta_at(t) {
        return false;
    }
    let n = n as i64;
    let last = (t - q - 1).div_euclid(n);
    (0..=last).all(|k| theta_at(q + 1 + k * n))
}

#[derive(Debug, Clone)]
pub struct CloudState {
    pub n: usize,
    pub q: i64,
    /// `x̂_{t|t−1}` before the estimator runs at `t`, `x̂_{t+1|t}` after.
    pub x_hat_prior: DVector<f64>,
    /// Every packet sent, keyed by the slot it was sent for.
    pub plans: BTreeMap<i64, ControllerPacket>,
}

impl CloudState {
    pub fn new(n: usize, x0: DVector<f64>, first: ControllerPacket) -> Self {
        let mut plans = BTreeMap::new();
        plans.insert(0, first);
        CloudState {
            n,
            q: -1,
            x_hat_prior: x0,
            plans,
        }
    }

    pub fn last_sent(&self) -> &ControllerPacket {
        self.plans.values().next_back().expect("at least the bootstrap packet")
    }

    /// Returns `(x̂_{t|t}, û_{t|t})` and stores `x̂_{t+1|t}`.
    pub fn estimator_step(
        &mut self,
        t: i64,
        uplink: Option<&PlantPacket>,
        model: &LtiModel,
        k: &DMatrix<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let (x_hat, u_hat) = match uplink {
            Some(pkt) => {
                let plan = &self.plans[&pkt.s];
                (pkt.x.clone(), plan_input(plan, t - pkt.s, &pkt.x, k))
            }
            None => {
                let t_hat = t - t.rem_euclid(self.n as i64);
                let plan = &self.plans[&t_hat];
                let x = self.x_hat_prior.clone();
                let u = plan_input(plan, t - t_hat, &x, k);
                (x, u)
            }
        };
        self.x_hat_prior = model.step(&x_hat, &u_hat);
        (x_hat, u_hat)
    }

    /// On slots with `(t+1) mod n = 0`: update `q`, solve at `x̂_{t+1|t}` and
    /// return the packet for slot `t+1` with the solve time.
    pub fn controller_step(
        &mut self,
        t: i64,
        gamma: bool,
        reference: &DVector<f64>,
        controller: &MpcController,
    ) -> Option<Result<(ControllerPacket, f64), MpcError>> {
        if (t + 1).rem_euclid(self.n as i64) != 0 {
            return None;
        }
        if gamma {
            self.q = t;
        }
        Some(controller.solve(&self.x_hat_prior, reference).map(|sol| {
            let pkt = ControllerPacket {
                u_slice: sol.packet_slice().to_vec(),
                xbar: sol.xbar.clone(),
                ubar: sol.ubar.clone(),
                q: self.q,
            };
            self.plans.insert(t + 1, pkt.clone());
            (pkt, sol.solve_time)
        }))
    }
}

#[derive(Debug, Clone)]
pub struct ActuatorState {
    pub n: usize,
    pub s: i64,
    pub buffer: ControllerPacket,
    pub theta_history: Vec<bool>,
    pub consistency_history: Vec<bool>,
}

impl ActuatorState {
    pub fn new(n: usize, first: ControllerPacket) -> Self {
        ActuatorState {
            n,
            s: 0,
            buffer: first,
            theta_history: Vec::new(),
            consistency_history: Vec::new(),
        }
    }

    /// Applies slot `t`; returns `(u_t, Θ_t)`. Must be called for every
    /// slot in order.
    pub fn step(
        &mut self,
        t: i64,
        theta: bool,
        pkt: Option<&ControllerPacket>,
        x: &DVector<f64>,
        k: &DMatrix<f64>,
    ) -> (DVector<f64>, bool) {
        debug_assert_eq!(self.theta_history.len() as i64, t);
        self.theta_history.push(theta);
        let big_theta = match (theta, pkt) {
            (true, Some(p)) => consistency(p.q, self.n, &self.theta_history, t),
            _ => false,
        };
        self.consistency_history.push(big_theta);
        if big_theta {
            self.buffer = pkt.expect("consistent slot carries a packet").clone();
            self.s = t;
        }
        (plan_input(&self.buffer, t - self.s, x, k), big_theta)
    }

    /// `Θ` at the latest send slot `t − t mod n`.
    pub fn window_consistent(&self, t: i64) -> bool {
        let t_hat = t - t.rem_euclid(self.n as i64);
        self.consistency_history.get(t_hat as usize).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub n: usize,
    pub steps: usize,
    pub x0: DVector<f64>,
    pub reference: ReferenceSchedule,
    pub links: LinkConfig,
    pub seed: u64,
    /// Embedded in every output file.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: i64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub r: DVector<f64>,
    pub gamma: bool,
    pub theta: bool,
    pub big_theta: bool,
    /// `Θ_{t − t mod n}`.
    pub consistent: bool,
    /// Actuator timestamp before this slot's update.
    pub s: i64,
    pub q: i64,
    pub x_hat_prior: DVector<f64>,
    pub up_sent: bool,
    pub down_sent: bool,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub solve_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpisodeStatus {
    Completed,
    Infeasible { t: i64 },
    Diverged { t: i64 },
    ConsistencyViolation { t: i64, gap: f64 },
}

impl EpisodeStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, EpisodeStatus::Completed)
    }

    fn label(&self) -> String {
        match self {
            EpisodeStatus::Completed => "completed".into(),
            EpisodeStatus::Infeasible { t } => format!("infeasible t={t}"),
            EpisodeStatus::Diverged { t } => format!("diverged t={t}"),
            EpisodeStatus::ConsistencyViolation { t, gap } => format!("consistency_violation t={t} gap={gap}"),
        }
    }

    fn parse(text: &str) -> Option<Self> {
        let mut parts = text.split_whitespace();
        let kind = parts.next()?;
        let mut field = |name: &str| -> Option<String> {
            parts.next()?.strip_prefix(name)?.strip_prefix('=').map(str::to_string)
        };
        Some(match kind {
            "completed" => EpisodeStatus::Completed,
            "infeasible" => EpisodeStatus::Infeasible { t: field("t")?.parse().ok()? },
            "diverged" => EpisodeStatus::Diverged { t: field("t")?.parse().ok()? },
            "consistency_violation" => EpisodeStatus::ConsistencyViolation {
                t: field("t")?.parse().ok()?,
                gap: field("gap")?.parse().ok()?,
            },
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub config_hash: String,
    pub seed: u64,
    pub nx: usize,
    pub nu: usize,
    pub n: usize,
    pub ts: f64,
    /// Whether the plant was the linear model (prediction gap is asserted).
    pub linear: bool,
    pub records: Vec<StepRecord>,
    pub status: EpisodeStatus,
    /// Normalized violations of `X` and `U` per step, kept for metrics.
    pub x_violation: Vec<f64>,
    pub u_violation: Vec<f64>,
}

pub fn run_episode(controller: &MpcController, plant: &TruthPlant, cfg: &EpisodeConfig) -> Result<SimTrace, EpisodeError> {
    let ocp = &controller.ocp;
    let model = &ocp.model;
    let k = &ocp.terminal.k;
    let (nx, nu) = (model.nx(), model.nu());
    let n = cfg.n;
    if n == 0 || n > ocp.spec.h1() {
        return Err(EpisodeError::Config(format!(
            "communication rate n = {n} must satisfy 1 <= n <= h1 = {}",
            ocp.spec.h1()
        )));
    }
    if cfg.x0.len() != nx || cfg.reference.dim() != nx {
        return Err(EpisodeError::Config("initial state or reference has the wrong size".into()));
    }
    if cfg.steps == 0 {
        return Err(EpisodeError::Config("episode needs at least one step".into()));
    }
    let header = cfg.links.header_bytes;
    let mut net = Network::new(&cfg.links, cfg.seed)?;
    net.bootstrap();

    let first = match controller.solve(&cfg.x0, cfg.reference.at(0)) {
        Ok(sol) => sol,
        Err(MpcError::Infeasible) => return Err(EpisodeError::InitialInfeasible),
        Err(MpcError::SolverError) => return Err(EpisodeError::Solver { t: -1 }),
        Err(e) => return Err(e.into()),
    };
    let first = ControllerPacket {
        u_slice: first.packet_slice().to_vec(),
        xbar: first.xbar.clone(),
        ubar: first.ubar.clone(),
        q: -1,
    };
    let down_bytes = measure_bytes(&first, header);
    let up_bytes = measure_bytes(
        &PlantPacket {
            x: DVector::zeros(nx),
            s: 0,
        },
        header,
    );
    let mut cloud = CloudState::new(n, cfg.x0.clone(), first.clone());
    let mut actuator = ActuatorState::new(n, first.clone());
    let mut pending = Some(first);

    let mut trace = SimTrace {
        config_hash: cfg.config_hash.clone(),
        seed: cfg.seed,
        nx,
        nu,
        n,
        ts: model.ts(),
        linear: plant.is_linear(),
        records: Vec::with_capacity(cfg.steps),
        status: EpisodeStatus::Completed,
        x_violation: Vec::with_capacity(cfg.steps),
        u_violation: Vec::with_capacity(cfg.steps),
    };

    let mut x = cfg.x0.clone();
    for step in 0..cfg.steps {
        let t = step as i64;
        net.tick();
        let down_sent = t.rem_euclid(n as i64) == 0;
        let theta = if down_sent { net.downlink(t, t == 0)? } else { false };
        let pkt = if down_sent { pending.take() } else { None };
        let s_pre = actuator.s;
        let x_hat_prior = cloud.x_hat_prior.clone();
        let (u, big_theta) = actuator.step(t, theta, if theta { pkt.as_ref() } else { None }, &x, k);
        let consistent = actuator.window_consistent(t);
        let reference = cfg.reference.at(step).clone();

        let up_sent = (t + 1).rem_euclid(n as i64) == 0;
        let gamma = if up_sent { net.uplink(t, false)? } else { false };

        let mut record = StepRecord {
            t,
            x: x.clone(),
            u: u.clone(),
            r: reference,
            gamma,
            theta,
            big_theta,
            consistent,
            s: s_pre,
            q: cloud.q,
            x_hat_prior,
            up_sent,
            down_sent,
            bytes_up: if up_sent { up_bytes } else { 0 },
            bytes_down: if down_sent { down_bytes } else { 0 },
            solve_time: None,
        };
        trace.x_violation.push(model.x_set().violation(&x).unwrap_or(f64::INFINITY));
        trace.u_violation.push(model.u_set().violation(&u).unwrap_or(f64::INFINITY));

        if trace.linear && consistent {
            let gap = (&x - &record.x_hat_prior).amax();
            if gap > CONSISTENCY_TOL {
                trace.status = EpisodeStatus::ConsistencyViolation { t, gap };
                trace.records.push(record);
                break;
            }
        }

        let x_next = match plant.step(&x, &u) {
            Ok(v) => v,
            Err(PlantError::Diverged { .. } | PlantError::NonFinite) => {
                trace.status = EpisodeStatus::Diverged { t };
                trace.records.push(record);
                break;
            }
            Err(e) => return Err(EpisodeError::Config(e.to_string())),
        };

        let uplink = gamma.then(|| PlantPacket { x: x.clone(), s: actuator.s });
        cloud.estimator_step(t, uplink.as_ref(), model, k);
        let next_ref = cfg.reference.at(step + 1).clone();
        match cloud.controller_step(t, gamma, &next_ref, controller) {
            None => {}
            Some(Ok((pkt, solve_time))) => {
                record.solve_time = Some(solve_time);
                pending = Some(pkt);
            }
            Some(Err(MpcError::Infeasible)) => {
                record.q = cloud.q;
                trace.status = EpisodeStatus::Infeasible { t };
                trace.records.push(record);
                break;
            }
            Some(Err(MpcError::SolverError)) => return Err(EpisodeError::Solver { t }),
            Some(Err(e)) => return Err(e.into()),
        }
        record.q = cloud.q;
        trace.records.push(record);
        x = x_next;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub success: bool,
    pub status: EpisodeStatus,
    pub mse: f64,
    pub final_error: f64,
    pub uplink_packets: usize,
    pub downlink_packets: usize,
    pub uplink_loss_pct: f64,
    pub downlink_loss_pct: f64,
    pub uplink_bytes_per_s: f64,
    pub downlink_bytes_per_s: f64,
    pub solves: usize,
    pub mean_solve_time: f64,
    pub std_solve_time: f64,
    pub x_violations: usize,
    pub u_violations: usize,
    pub max_consistency_gap: f64,
}

fn pct(lost: usize, sent: usize) -> f64 {
    if sent == 0 {
        0.0
    } else {
        100.0 * lost as f64 / sent as f64
    }
}

pub fn metrics(trace: &SimTrace) -> MetricsReport {
    let recs = &trace.records;
    let steps = recs.len();
    let sq: Vec<f64> = recs.iter().map(|r| (&r.x - &r.r).norm_squared()).collect();
    let mse = if steps == 0 { 0.0 } else { sq.iter().sum::<f64>() / steps as f64 };
    let final_error = recs.last().map(|r| (&r.x - &r.r).norm()).unwrap_or(f64::NAN);
    let up_sent = recs.iter().filter(|r| r.up_sent).count();
    let up_lost = recs.iter().filter(|r| r.up_sent && !r.gamma).count();
    let down_sent = recs.iter().filter(|r| r.down_sent).count();
    let down_lost = recs.iter().filter(|r| r.down_sent && !r.theta).count();
    let duration = steps as f64 * trace.ts;
    let per_s = |b: usize| if duration > 0.0 { b as f64 / duration } else { 0.0 };
    let times: Vec<f64> = recs.iter().filter_map(|r| r.solve_time).collect();
    let mean = if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 };
    let var = if times.is_empty() {
        0.0
    } else {
        times.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / times.len() as f64
    };
    let max_gap = recs
        .iter()
        .filter(|r| r.consistent)
        .map(|r| (&r.x - &r.x_hat_prior).amax())
        .fold(0.0, f64::max);
    MetricsReport {
        config_hash: trace.config_hash.clone(),
        seed: trace.seed,
        steps,
        success: trace.status.is_success(),
        status: trace.status.clone(),
        mse,
        final_error,
        uplink_packets: up_sent,
        downlink_packets: down_sent,
        uplink_loss_pct: pct(up_lost, up_sent),
        downlink_loss_pct: pct(down_lost, down_sent),
        uplink_bytes_per_s: per_s(recs.iter().map(|r| r.bytes_up).sum()),
        downlink_bytes_per_s: per_s(recs.iter().map(|r| r.bytes_down).sum()),
        solves: times.len(),
        mean_solve_time: mean,
        std_solve_time: var.sqrt(),
        x_violations: trace.x_violation.iter().filter(|&&v| v > VIOLATION_TOL).count(),
        u_violations: trace.u_violation.iter().filter(|&&v| v > VIOLATION_TOL).count(),
        max_consistency_gap: max_gap,
    }
}

#[derive(Debug, Error)]
pub enum TraceParseError {
    #[error("trace csv line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("trace csv is missing the {0} header")]
    Missing(&'static str),
}

fn bit(b: bool) -> u8 {
    u8::from(b)
}

fn join(v: &DVector<f64>) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl SimTrace {
    fn column_names(&self) -> Vec<String> {
        let mut cols = vec!["t".to_string()];
        cols.extend((0..self.nx).map(|i| format!("x{i}")));
        cols.extend((0..self.nu).map(|i| format!("u{i}")));
        cols.extend((0..self.nx).map(|i| format!("r{i}")));
        for c in ["gamma", "theta", "big_theta", "consistent", "s", "q"] {
            cols.push(c.into());
        }
        cols.extend((0..self.nx).map(|i| format!("xhat{i}")));
        for c in ["up_sent", "down_sent", "bytes_up", "bytes_down", "x_violation", "u_violation"] {
            cols.push(c.into());
        }
        cols
    }

    fn provenance(&self) -> String {
        format!("# config_hash={}, seed={}\n", self.config_hash, self.seed)
    }

    /// Per-step CSV. Wall-clock solve times are kept out so that reruns are
    /// byte-identical; see [`SimTrace::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut s = self.provenance();
        let _ = writeln!(
            s,
            "# nx={}, nu={}, n={}, ts={}, linear={}",
            self.nx,
            self.nu,
            self.n,
            self.ts,
            bit(self.linear)
        );
        let _ = writeln!(s, "{}", self.column_names().join(","));
        for (i, r) in self.records.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                join(&r.x),
                join(&r.u),
                join(&r.r),
                bit(r.gamma),
                bit(r.theta),
                bit(r.big_theta),
                bit(r.consistent),
                r.s,
                r.q,
                join(&r.x_hat_prior),
                bit(r.up_sent),
                bit(r.down_sent),
                r.bytes_up,
                r.bytes_down,
                self.x_violation[i],
                self.u_violation[i],
            );
        }
        let _ = writeln!(s, "# status={}", self.status.label());
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = self.provenance();
        s.push_str("t,solve_time\n");
        for r in &self.records {
            if let Some(v) = r.solve_time {
                let _ = writeln!(s, "{},{}", r.t, v);
            }
        }
        s
    }

    /// Inverse of [`SimTrace::to_csv`], optionally merged with timing data.
    pub fn from_csv(trace: &str, timing: Option<&str>) -> Result<SimTrace, TraceParseError> {
        let err = |line: usize, msg: &str| TraceParseError::Line {
            line: line + 1,
            msg: msg.to_string(),
        };
        let mut lines = trace.lines().enumerate();
        let (_, prov) = lines.next().ok_or(TraceParseError::Missing("provenance"))?;
        let (config_hash, seed) = parse_provenance(prov).ok_or(TraceParseError::Missing("provenance"))?;
        let (li, dims) = lines.next().ok_or(TraceParseError::Missing("dimension"))?;
        let kv = |key: &str| {
            dims.trim_start_matches('#')
                .split(',')
                .filter_map(|p| p.trim().split_once('='))
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.to_string())
                .ok_or_else(|| err(li, &format!("missing {key}")))
        };
        let nx: usize = kv("nx")?.parse().map_err(|_| err(li, "bad nx"))?;
        let nu: usize = kv("nu")?.parse().map_err(|_| err(li, "bad nu"))?;
        let n: usize = kv("n")?.parse().map_err(|_| err(li, "bad n"))?;
        let ts: f64 = kv("ts")?.parse().map_err(|_| err(li, "bad ts"))?;
        let linear = kv("linear")? == "1";
        lines.next().ok_or(TraceParseError::Missing("column"))?;

        let mut records = Vec::new();
        let mut xv = Vec::new();
        let mut uv = Vec::new();
        let mut status = None;
        for (li, line) in lines {
            if let Some(rest) = line.strip_prefix("# status=") {
                status = Some(EpisodeStatus::parse(rest).ok_or_else(|| err(li, "bad status"))?);
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let expected = 1 + 3 * nx + nu + 6 + 6;
            if f.len() != expected {
                return Err(err(li, &format!("expected {expected} fields, found {}", f.len())));
            }
            let mut it = f.into_iter();
            let mut num = |what: &str| -> Result<f64, TraceParseError> {
                it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err(li, what))
            };
            let t = num("t")? as i64;
            let x = DVector::from_iterator(nx, (0..nx).map(|_| num("x")).collect::<Result<Vec<_>, _>>()?);
            let u = DVector::from_iterator(nu, (0..nu).map(|_| num("u")).collect::<Result<Vec<_>, _>>()?);
            let r = DVector::from_iterator(nx, (0..nx).map(|_| num("r")).collect::<Result<Vec<_>, _>>()?);
            let gamma = num("gamma")? != 0.0;
            let theta = num("theta")? != 0.0;
            let big_theta = num("big_theta")? != 0.0;
            let consistent = num("consistent")? != 0.0;
            let s = num("s")? as i64;
            let q = num("q")? as i64;
            let x_hat_prior = DVector::from_iterator(nx, (0..nx).map(|_| num("xhat")).collect::<Result<Vec<_>, _>>()?);
            let up_sent = num("up_sent")? != 0.0;
            let down_sent = num("down_sent")? != 0.0;
            let bytes_up = num("bytes_up")? as usize;
            let bytes_down = num("bytes_down")? as usize;
            xv.push(num("x_violation")?);
            uv.push(num("u_violation")?);
            records.push(StepRecord {
                t,
                x,
                u,
                r,
                gamma,
                theta,
                big_theta,
                consistent,
                s,
                q,
                x_hat_prior,
                up_sent,
                down_sent,
                bytes_up,
                bytes_down,
                solve_time: None,
            });
        }
        if let Some(timing) = timing {
            let times: BTreeMap<i64, f64> = timing
                .lines()
                .skip(2)
                .filter_map(|l| {
                    let (t, v) = l.split_once(',')?;
                    Some((t.parse().ok()?, v.parse().ok()?))
                })
                .collect();
            for r in &mut records {
                r.solve_time = times.get(&r.t).copied();
            }
        }
        Ok(SimTrace {
            config_hash,
            seed,
            nx,
            nu,
            n,
            ts,
            linear,
            records,
            status: status.ok_or(TraceParseError::Missing("status"))?,
            x_violation: xv,
            u_violation: uv,
        })
    }
}

fn parse_provenance(line: &str) -> Option<(String, u64)> {
    let rest = line.strip_prefix("# config_hash=")?;
    let (hash, seed) = rest.split_once(", seed=")?;
    Some((hash.to_string(), seed.trim().parse().ok()?))
}
