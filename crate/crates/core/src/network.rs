//! Lossy links between the cloud controller and the plant.
//!
//! A packet is either available at its deadline slot or counted as lost;
//! delay is not modeled separately.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{name} must lie in [0, 1], got {value}")]
    InvalidProbability { name: &'static str, value: f64 },
    #[error("loss trace exhausted at slot {t} (length {len})")]
    TraceExhausted { t: i64, len: usize },
    #[error("guard bound must be at least 1")]
    InvalidGuard,
    #[error("correlated mode needs Gilbert-Elliott processes on both links")]
    CorrelationUnsupported,
    #[error("loss trace line {line}: expected 0 or 1, got {text:?}")]
    Parse { line: usize, text: String },
    #[error("loss trace i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Inputs for the next `h₁` steps plus the steady target they steer to.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerPacket {
    pub u_slice: Vec<DVector<f64>>,
    pub xbar: DVector<f64>,
    pub ubar: DVector<f64>,
    /// Timestamp of the last plant packet the cloud received.
    pub q: i64,
}

/// Measured state and the time of the plan the actuator is executing.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantPacket {
    pub x: DVector<f64>,
    pub s: i64,
}

pub trait Packet {
    fn scalar_count(&self) -> usize;
    fn integer_count(&self) -> usize;
}

impl Packet for ControllerPacket {
    fn scalar_count(&self) -> usize {
        self.u_slice.iter().map(|u| u.len()).sum::<usize>() + self.xbar.len() + self.ubar.len()
    }
    fn integer_count(&self) -> usize {
        1
    }
}

impl Packet for PlantPacket {
    fn scalar_count(&self) -> usize {
        self.x.len()
    }
    fn integer_count(&self) -> usize {
        1
    }
}

pub const DEFAULT_HEADER_BYTES: usize = 60;

/// Wire size: 8 bytes per real and per integer field, plus `header`.
pub fn measure_bytes<P: Packet>(pkt: &P, header: usize) -> usize {
    8 * (pkt.scalar_count() + pkt.integer_count()) + header
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossProcess {
    Bernoulli {
        p: f64,
    },
    GilbertElliott {
        p_gb: f64,
        p_bg: f64,
        loss_good: f64,
        loss_bad: f64,
    },
    /// Delivery bits indexed by slot; `true` means delivered.
    TraceReplay {
        bits: Vec<bool>,
    },
}

impl Default for LossProcess {
    fn default() -> Self {
        LossProcess::Bernoulli { p: 0.0 }
    }
}

impl LossProcess {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let check = |name, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(NetworkError::InvalidProbability { name, value })
            }
        };
        match *self {
            LossProcess::Bernoulli { p } => check("p", p),
            LossProcess::GilbertElliott {
                p_gb,
                p_bg,
                loss_good,
                loss_bad,
            } => {
                check("p_gb", p_gb)?;
                check("p_bg", p_bg)?;
                check("loss_good", loss_good)?;
                check("loss_bad", loss_bad)
            }
            LossProcess::TraceReplay { .. } => Ok(()),
        }
    }

    pub fn lossless() -> Self {
        LossProcess::Bernoulli { p: 0.0 }
    }
}

/// One direction of the link with its own random stream.
#[derive(Debug, Clone)]
pub struct Channel {
    process: LossProcess,
    rng: ChaCha8Rng,
    bad: bool,
}

impl Channel {
    pub fn new(process: LossProcess, seed: u64, stream: u64) -> Result<Self, NetworkError> {
        process.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Channel {
            process,
            rng,
            bad: false,
        })
    }

    /// Delivery draw for slot `t`. Gilbert-Elliott advances its own state
    /// unless `shared_bad` supplies the state of a common chain.
    pub fn realize(&mut self, t: i64, shared_bad: Option<bool>) -> Result<bool, NetworkError> {
        match &self.process {
            LossProcess::Bernoulli { p } => Ok(self.rng.random::<f64>() >= *p),
            LossProcess::GilbertElliott {
                p_gb,
                p_bg,
                loss_good,
                loss_bad,
            } => {
                let bad = match shared_bad {
                    Some(b) => b,
                    None => {
                        let flip = self.rng.random::<f64>();
                        self.bad = if self.bad { flip >= *p_bg } else { flip < *p_gb };
                        self.bad
                    }
                };
                let loss = if bad { *loss_bad } else { *loss_good };
                Ok(self.rng.random::<f64>() >= loss)
            }
            LossProcess::TraceReplay { bits } => {
                let idx = usize::try_from(t).map_err(|_| NetworkError::TraceExhausted { t, len: bits.len() })?;
                bits.get(idx)
                    .copied()
                    .ok_or(NetworkError::TraceExhausted { t, len: bits.len() })
            }
        }
    }
}

/// Enforces a back-to-back success (uplink, then the following downlink)
/// after `bound` consecutive failed rounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossStreakGuard {
    bound: usize,
    failed_rounds: usize,
}

impl LossStreakGuard {
    pub fn new(bound: usize) -> Result<Self, NetworkError> {
        if bound == 0 {
            return Err(NetworkError::InvalidGuard);
        }
        Ok(LossStreakGuard {
            bound,
            failed_rounds: 0,
        })
    }

    /// Whether the round about to start must succeed.
    pub fn forced(&self) -> bool {
        self.failed_rounds >= self.bound
    }

    pub fn record_round(&mut self, uplink: bool, downlink: bool) {
        if uplink && downlink {
            self.failed_rounds = 0;
        } else {
            self.failed_rounds += 1;
        }
    }
}

/// Stateless form of the guard over a history of `(γ, θ)` rounds.
pub fn loss_streak_guard(history: &[(bool, bool)], bound: usize) -> bool {
    let trailing = history.iter().rev().take_while(|(g, th)| !(*g && *th)).count();
    trailing >= bound
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    #[serde(default)]
    pub uplink: LossProcess,
    #[serde(default)]
    pub downlink: LossProcess,
    /// Maximum consecutive failed rounds before a forced success.
    #[serde(default)]
    pub guard: Option<usize>,
    /// Share one Gilbert-Elliott state (transition rates of the uplink).
    #[serde(default)]
    pub correlated: bool,
    #[serde(default = "default_header")]
    pub header_bytes: usize,
}

fn default_header() -> usize {
    DEFAULT_HEADER_BYTES
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            uplink: LossProcess::lossless(),
            downlink: LossProcess::lossless(),
            guard: None,
            correlated: false,
            header_bytes: DEFAULT_HEADER_BYTES,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        self.uplink.validate()?;
        self.downlink.validate()?;
        if self.guard == Some(0) {
            return Err(NetworkError::InvalidGuard);
        }
        if self.correlated
            && !(matches!(self.uplink, LossProcess::GilbertElliott { .. })
                && matches!(self.downlink, LossProcess::GilbertElliott { .. }))
        {
            return Err(NetworkError::CorrelationUnsupported);
        }
        Ok(())
    }
}

/// Both directions plus the optional guard; owned by one episode.
#[derive(Debug, Clone)]
pub struct Network {
    uplink: Channel,
    downlink: Channel,
    guard: Option<LossStreakGuard>,
    shared: Option<(Channel, f64, f64)>,
    shared_bad: bool,
    pending_round: Option<(bool, bool)>,
}

impl Network {
    pub fn new(cfg: &LinkConfig, seed: u64) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let shared = match (&cfg.uplink, cfg.correlated) {
            (LossProcess::GilbertElliott { p_gb, p_bg, .. }, true) => {
                Some((Channel::new(LossProcess::lossless(), seed, 3)?, *p_gb, *p_bg))
            }
            _ => None,
        };
        Ok(Network {
            uplink: Channel::new(cfg.uplink.clone(), seed, 1)?,
            downlink: Channel::new(cfg.downlink.clone(), seed, 2)?,
            guard: cfg.guard.map(LossStreakGuard::new).transpose()?,
            shared,
            shared_bad: false,
            pending_round: None,
        })
    }

    /// Counts the episode's initial exchange as a successful round.
    pub fn bootstrap(&mut self) {
        self.pending_round = Some((true, true));
    }

    /// Advance the shared congestion state, once per slot.
    pub fn tick(&mut self) {
        if let Some((ch, p_gb, p_bg)) = &mut self.shared {
            let flip = ch.rng.random::<f64>();
            self.shared_bad = if self.shared_bad { flip >= *p_bg } else { flip < *p_gb };
        }
    }

    fn shared_state(&self) -> Option<bool> {
        self.shared.as_ref().map(|_| self.shared_bad)
    }

    /// Uplink draw for the packet sent in `(t, t+1)`; opens a guard round.
    pub fn uplink(&mut self, t: i64, force: bool) -> Result<bool, NetworkError> {
        let drawn = self.uplink.realize(t, self.shared_state())?;
        let forced = force || self.guard.as_ref().is_some_and(|g| g.forced());
        self.pending_round = Some((drawn || forced, forced));
        Ok(drawn || forced)
    }

    /// Downlink draw at send slot `t`; closes the open guard round.
    pub fn downlink(&mut self, t: i64, force: bool) -> Result<bool, NetworkError> {
        let drawn = self.downlink.realize(t, self.shared_state())?;
        let (gamma, forced_round) = self.pending_round.take().unwrap_or((false, false));
        let delivered = drawn || force || forced_round;
        if let Some(g) = &mut self.guard {
            g.record_round(gamma, delivered);
        }
        Ok(delivered)
    }
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<bool>, NetworkError> {
    let text = std::fs::read_to_string(path)?;
    parse_loss_trace(&text)
}

pub fn parse_loss_trace(text: &str) -> Result<Vec<bool>, NetworkError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(NetworkError::Parse {
                line: i + 1,
                text: other.to_string(),
            }),
        })
        .collect()
}

pub fn write_loss_trace(path: &Path, bits: &[bool]) -> Result<(), NetworkError> {
    let text: String = bits.iter().map(|&b| if b { "1\n" } else { "0\n" }).collect();
    std::fs::write(path, text)?;
    Ok(())
}
