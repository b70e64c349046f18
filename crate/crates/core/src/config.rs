//! JSON experiment configuration: one file fully determines a run.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::closed_loop::{EpisodeConfig, ReferenceSchedule, ReferenceSegment};
use crate::mpc::{MpcController, MpcError, TrackingOcp};
use crate::network::LinkConfig;
use crate::plant::{
    steady_state_basis, terminal_pair, zoh_discretize, CartPoleParams, LtiModel, MultiHorizonSpec, PlantError, PlantKind,
    TruthPlant,
};
use crate::polytope::{Polytope, PolytopeError};
use crate::sets::{build_oinf_mh, cache_key, feasible_set_x02, load_cached, save_cached, SetError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration:\n{}", .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<String>),
    #[error("cannot parse configuration: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read configuration {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("model rejected: {0}")]
    Plant(#[from] PlantError),
    #[error("constraint bounds rejected: {0}")]
    Polytope(#[from] PolytopeError),
}

/// Errors while building the controller from a valid configuration.
#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Sets(#[from] SetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Discrete-time `(A, B)` at sample time `ts`.
    Discrete { a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, ts: f64 },
    /// Continuous-time `(A, B)`, zero-order-hold discretized at `ts`.
    Continuous { a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, ts: f64 },
    /// Cart-pole linearized about the upright equilibrium.
    CartPole {
        #[serde(default)]
        params: CartPoleParams,
        ts: f64,
        #[serde(default = "default_substeps")]
        substeps: usize,
    },
}

fn default_substeps() -> usize {
    4
}

impl ModelSpec {
    pub fn ts(&self) -> f64 {
        match self {
            ModelSpec::Discrete { ts, .. } | ModelSpec::Continuous { ts, .. } | ModelSpec::CartPole { ts, .. } => *ts,
        }
    }

    /// Whether two specs describe the same physical plant (sample time may differ
    /// unless the model is given in discrete time).
    pub fn same_plant(&self, other: &ModelSpec) -> bool {
        match (self, other) {
            (ModelSpec::Discrete { .. }, ModelSpec::Discrete { .. }) => self == other,
            (ModelSpec::Continuous { a, b, .. }, ModelSpec::Continuous { a: a2, b: b2, .. }) => a == a2 && b == b2,
            (ModelSpec::CartPole { params, .. }, ModelSpec::CartPole { params: p2, .. }) => params == p2,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantSpec {
    /// Simulate the controller's own discrete model.
    #[default]
    Linear,
    /// Simulate the nonlinear cart-pole (cart-pole models only).
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

/// A weight given either by its diagonal or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Weight {
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            Weight::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            Weight::Full(rows) => rows_to_matrix(rows).unwrap_or_else(|| DMatrix::zeros(0, 0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub q: Weight,
    pub r: Weight,
    /// Offset cost on `x̄ − r`.
    pub t: Weight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub model: ModelSpec,
    #[serde(default)]
    pub plant: PlantSpec,
    pub bounds: Bounds,
    pub cost: CostSpec,
    pub horizon: MultiHorizonSpec,
    #[serde(default = "one")]
    pub n: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default)]
    pub links: LinkConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub x0: Vec<f64>,
    pub reference: Vec<ReferenceSegment>,
    #[serde(default = "default_divergence")]
    pub divergence_bound: f64,
    #[serde(default = "default_tol")]
    pub solver_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

fn one() -> usize {
    1
}
fn default_lambda() -> f64 {
    0.99
}
fn default_k_max() -> usize {
    500
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_divergence() -> f64 {
    1e3
}
fn default_tol() -> f64 {
    1e-8
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short hex digest of the canonical serialization; labels and output
    /// locations do not take part.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.label = None;
        canonical.out_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        format!("{:x}", Sha256::digest(&bytes))[..16].to_string()
    }

    fn dims(&self) -> Result<(usize, usize), String> {
        match &self.model {
            ModelSpec::Discrete { a, b, .. } | ModelSpec::Continuous { a, b, .. } => {
                let a = rows_to_matrix(a).ok_or("model.a: ragged rows")?;
                let b = rows_to_matrix(b).ok_or("model.b: ragged rows")?;
                if !a.is_square() || a.nrows() == 0 {
                    return Err(format!("model.a: must be square and nonempty, got {}x{}", a.nrows(), a.ncols()));
                }
                if b.nrows() != a.nrows() || b.ncols() == 0 {
                    return Err(format!("model.b: expected {} rows and at least one column, got {}x{}", a.nrows(), b.nrows(), b.ncols()));
                }
                Ok((a.nrows(), b.ncols()))
            }
            ModelSpec::CartPole { .. } => Ok((4, 1)),
        }
    }

    /// Field-level checks; every problem is reported, not just the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let ts = self.model.ts();
        if !(ts.is_finite() && ts > 0.0) {
            issues.push(format!("model.ts: must be positive, got {ts}"));
        }
        if let ModelSpec::CartPole { params, substeps, .. } = &self.model {
            if *substeps == 0 {
                issues.push("model.substeps: must be at least 1".into());
            }
            if !(params.cart_mass > 0.0 && params.pole_mass > 0.0 && params.half_length > 0.0) {
                issues.push("model.params: masses and length must be positive".into());
            }
        } else if self.plant == PlantSpec::Nonlinear {
            issues.push("plant: nonlinear simulation requires a cart_pole model".into());
        }
        match self.dims() {
            Err(e) => issues.push(e),
            Ok((nx, nu)) => self.check_dims(nx, nu, &mut issues),
        }
        let h1 = self.horizon.h1();
        if self.n == 0 {
            issues.push("n: rate parameter must be at least 1".into());
        } else if self.n > h1 {
            issues.push(format!(
                "n: rate parameter n = {} exceeds the first horizon segment h1 = {h1}; the actuator buffer holds only h1 inputs",
                self.n
            ));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            issues.push(format!("lambda: must lie in (0, 1], got {}", self.lambda));
        }
        if self.k_max == 0 {
            issues.push("k_max: must be at least 1".into());
        }
        if let Err(e) = self.links.validate() {
            issues.push(format!("links: {e}"));
        }
        if self.seeds.is_empty() {
            issues.push("seeds: at least one seed is required".into());
        }
        if self.steps == 0 {
            issues.push("steps: must be at least 1".into());
        }
        if !(self.divergence_bound > 0.0) {
            issues.push("divergence_bound: must be positive".into());
        }
        if !(self.solver_tol > 0.0 && self.solver_tol < 1.0) {
            issues.push(format!("solver_tol: must lie in (0, 1), got {}", self.solver_tol));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    fn check_dims(&self, nx: usize, nu: usize, issues: &mut Vec<String>) {
        let b = &self.bounds;
        for (name, v, want) in [
            ("bounds.x_min", &b.x_min, nx),
            ("bounds.x_max", &b.x_max, nx),
            ("bounds.u_min", &b.u_min, nu),
            ("bounds.u_max", &b.u_max, nu),
            ("x0", &self.x0, nx),
        ] {
            if v.len() != want {
                issues.push(format!("{name}: expected {want} entries, got {}", v.len()));
            }
        }
        for (name, lo, hi) in [("x", &b.x_min, &b.x_max), ("u", &b.u_min, &b.u_max)] {
            if lo.iter().zip(hi.iter()).any(|(l, h)| !(l < h)) {
                issues.push(format!("bounds.{name}_min: must be strictly below {name}_max"));
            }
        }
        for (name, w, want) in [("cost.q", &self.cost.q, nx), ("cost.r", &self.cost.r, nu), ("cost.t", &self.cost.t, nx)] {
            let m = w.matrix();
            if m.nrows() != want || m.ncols() != want {
                issues.push(format!("{name}: expected {want}x{want}, got {}x{}", m.nrows(), m.ncols()));
            } else if (&m - m.transpose()).amax() > 1e-12 {
                issues.push(format!("{name}: must be symmetric"));
            }
        }
        if self.reference.is_empty() {
            issues.push("reference: at least one segment is required".into());
        } else {
            if !self.reference.iter().any(|s| s.start == 0) {
                issues.push("reference: a segment must start at t = 0".into());
            }
            for (i, seg) in self.reference.iter().enumerate() {
                if seg.r.len() != nx {
                    issues.push(format!("reference[{i}].r: expected {nx} entries, got {}", seg.r.len()));
                }
            }
        }
    }

    pub fn model(&self) -> Result<LtiModel, ConfigError> {
        let ts = self.model.ts();
        let (a, b) = match &self.model {
            ModelSpec::Discrete { a, b, .. } => (rows_to_matrix(a), rows_to_matrix(b)),
            ModelSpec::Continuous { a, b, .. } => {
                let (ac, bc) = (rows_to_matrix(a), rows_to_matrix(b));
                match (ac, bc) {
                    (Some(ac), Some(bc)) => {
                        let (a, b) = zoh_discretize(&ac, &bc, ts)?;
                        (Some(a), Some(b))
                    }
                    _ => (None, None),
                }
            }
            ModelSpec::CartPole { params, .. } => {
                let (ac, bc) = params.linearize();
                let (a, b) = zoh_discretize(&ac, &bc, ts)?;
                (Some(a), Some(b))
            }
        };
        let (a, b) = match (a, b) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(ConfigError::Invalid(vec!["model: ragged matrix rows".into()])),
        };
        let x_set = Polytope::from_box(&self.bounds.x_min, &self.bounds.x_max)?;
        let u_set = Polytope::from_box(&self.bounds.u_min, &self.bounds.u_max)?;
        Ok(LtiModel::new(a, b, ts, x_set, u_set)?)
    }

    pub fn truth_plant(&self, model: &LtiModel) -> TruthPlant {
        let kind = match (&self.model, self.plant) {
            (ModelSpec::CartPole { params, ts, substeps }, PlantSpec::Nonlinear) => PlantKind::CartPole {
                params: *params,
                ts: *ts,
                substeps: *substeps,
            },
            _ => PlantKind::Linear {
                a: model.a().clone(),
                b: model.b().clone(),
            },
        };
        TruthPlant {
            kind,
            divergence_bound: self.divergence_bound,
        }
    }

    /// Key under which the admissible set for this configuration is cached.
    pub fn sets_key(&self, model: &LtiModel) -> Result<String, BuildError> {
        let terminal = terminal_pair(model, &self.cost.q.matrix(), &self.cost.r.matrix()).map_err(ConfigError::from)?;
        Ok(cache_key(model, &self.horizon, &terminal.k, self.lambda, self.k_max))
    }

    /// Assemble the tracking problem, reusing `<cache_dir>/<key>.json` when
    /// present and writing it otherwise.
    pub fn build_ocp(&self, cache_dir: Option<&Path>) -> Result<TrackingOcp, BuildError> {
        let model = self.model()?;
        let (q, r, t) = (self.cost.q.matrix(), self.cost.r.matrix(), self.cost.t.matrix());
        let terminal = terminal_pair(&model, &q, &r).map_err(ConfigError::from)?;
        let basis = steady_state_basis(&model).map_err(ConfigError::from)?;
        let key = cache_key(&model, &self.horizon, &terminal.k, self.lambda, self.k_max);
        let path = cache_dir.map(|d| d.join(format!("{key}.json")));
        if let Some(p) = &path {
            if let Some((oinf, x02)) = load_cached(p, &key)? {
                let spec = self.horizon.clone();
                return Ok(TrackingOcp::from_parts(model, spec, q, r, t, terminal, basis, x02, oinf)?);
            }
        }
        let stages = crate::plant::stage_systems(&model, &q, &r, &self.horizon);
        let x02 = feasible_set_x02(&self.horizon, &stages, model.x_set(), model.u_set())?;
        let oinf = build_oinf_mh(&model, &terminal, &basis, &x02, self.lambda, self.k_max)?;
        if let Some(p) = &path {
            save_cached(p, &key, &oinf, &x02)?;
        }
        let spec = self.horizon.clone();
        Ok(TrackingOcp::from_parts(model, spec, q, r, t, terminal, basis, x02, oinf)?)
    }

    pub fn controller(&self, ocp: TrackingOcp) -> MpcController {
        MpcController::with_tolerance(ocp, self.solver_tol)
    }

    pub fn episode(&self, seed: u64) -> Result<EpisodeConfig, ConfigError> {
        let reference =
            ReferenceSchedule::new(&self.reference).map_err(|e| ConfigError::Invalid(vec![format!("reference: {e}")]))?;
        Ok(EpisodeConfig {
            n: self.n,
            steps: self.steps,
            x0: DVector::from_column_slice(&self.x0),
            reference,
            links: self.links.clone(),
            seed,
            config_hash: self.hash(),
        })
    }
}
