//! Invariant and feasible set constructions for the tracking controller.
//!
//! Sets over the extended state live in `(x, θ)` coordinates, where `θ`
//! parametrizes the steady pair through [`SteadyStateBasis`].

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::spectral_radius;
use crate::plant::{LtiModel, MultiHorizonSpec, StageSystem, SteadyStateBasis, TerminalPair};
use crate::polytope::{Polytope, PolytopeError, FEAS_TOL};
use crate::lp::LpOutcome;

#[derive(Debug, Error)]
pub enum SetError {
    #[error("state block of the extended system is not Schur stable (spectral radius {radius:.6})")]
    Unstable { radius: f64 },
    #[error("contraction factor must lie in (0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("constraint set W is empty")]
    EmptyConstraints,
    #[error("no admissible steady state exists")]
    EmptySteadyStates,
    #[error("feasible set of the tail problem is empty; horizon layout is infeasible")]
    EmptyX02,
    #[error("admissible set not finitely determined within {k_max} steps")]
    NotDetermined { k_max: usize },
    #[error("admissible set is empty")]
    EmptyAdmissible,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache format: {0}")]
    Json(#[from] serde_json::Error),
}

/// Autonomous dynamics of `(x, θ)` under the auxiliary law
/// `u = K(x̄ − x) + ū`, `(x̄, ū) = Mθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedSystem {
    ae: DMatrix<f64>,
    nx: usize,
}

impl ExtendedSystem {
    pub fn new(model: &LtiModel, k: &DMatrix<f64>, basis: &SteadyStateBasis) -> Self {
        let nx = model.nx();
        let nt = basis.ntheta();
        let acl = model.a() - model.b() * k;
        let coupling = model.b() * (k * basis.mx() + basis.mu());
        let mut ae = DMatrix::identity(nx + nt, nx + nt);
        ae.view_mut((0, 0), (nx, nx)).copy_from(&acl);
        ae.view_mut((0, nx), (nx, nt)).copy_from(&coupling);
        ExtendedSystem { ae, nx }
    }

    /// Build directly from a block matrix whose trailing `θ` block is
    /// expected to be the identity.
    pub fn from_matrix(ae: DMatrix<f64>, nx: usize) -> Result<Self, SetError> {
        if !ae.is_square() || nx > ae.nrows() {
            return Err(SetError::Dimension(format!("{}x{} with nx = {nx}", ae.nrows(), ae.ncols())));
        }
        Ok(ExtendedSystem { ae, nx })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.ae
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ntheta(&self) -> usize {
        self.ae.nrows() - self.nx
    }
    pub fn state_block(&self) -> DMatrix<f64> {
        self.ae.view((0, 0), (self.nx, self.nx)).into_owned()
    }

    pub fn step(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.ae * w
    }

    /// `E` with `x_eq = E θ` the equilibrium reached for fixed `θ`.
    fn equilibrium_map(&self) -> Option<DMatrix<f64>> {
        let nt = self.ntheta();
        let axx = self.state_block();
        let axt = self.ae.view((0, self.nx), (self.nx, nt)).into_owned();
        (DMatrix::identity(self.nx, self.nx) - axx).lu().solve(&axt)
    }
}

/// `{(x, θ) : x ∈ X, K(M_xθ − x) + M_uθ ∈ U}`.
pub fn build_w(x_set: &Polytope, u_set: &Polytope, k: &DMatrix<f64>, basis: &SteadyStateBasis) -> Result<Polytope, SetError> {
    let nx = x_set.dim();
    let nt = basis.ntheta();
    if basis.nx() != nx || k.nrows() != u_set.dim() || k.ncols() != nx {
        return Err(SetError::Dimension("X, U, K and basis disagree".into()));
    }
    let xa = x_set.normal_matrix();
    let ua = u_set.normal_matrix();
    let (rx, ru) = (xa.nrows(), ua.nrows());
    let mut a = DMatrix::zeros(rx + ru, nx + nt);
    a.view_mut((0, 0), (rx, nx)).copy_from(xa);
    a.view_mut((rx, 0), (ru, nx)).copy_from(&(-(ua * k)));
    a.view_mut((rx, nx), (ru, nt))
        .copy_from(&(ua * (k * basis.mx() + basis.mu())));
    let mut b = DVector::zeros(rx + ru);
    b.rows_mut(0, rx).copy_from(x_set.offset());
    b.rows_mut(rx, ru).copy_from(u_set.offset());
    let w = Polytope::new(a, b)?.normalize();
    if w.is_empty()? {
        return Err(SetError::EmptyConstraints);
    }
    Ok(w)
}

/// Finitely determined inner approximation of the maximal admissible set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleSet {
    pub set: Polytope,
    pub k_star: usize,
    pub lambda: f64,
    pub nx: usize,
}

impl AdmissibleSet {
    pub fn ntheta(&self) -> usize {
        self.set.dim() - self.nx
    }

    /// Rows restricted to fixed `θ`, as a polytope in `x`.
    pub fn slice_at(&self, theta: &DVector<f64>) -> Result<Polytope, SetError> {
        let a = self.set.normal_matrix();
        let ax = a.columns(0, self.nx).into_owned();
        let at = a.columns(self.nx, self.ntheta()).into_owned();
        Ok(Polytope::new(ax, self.set.offset() - at * theta)?)
    }

    pub fn contains(&self, x: &DVector<f64>, theta: &DVector<f64>, tol: f64) -> Result<bool, SetError> {
        let mut w = DVector::zeros(self.set.dim());
        w.rows_mut(0, self.nx).copy_from(x);
        w.rows_mut(self.nx, theta.len()).copy_from(theta);
        Ok(self.set.contains(&w, tol)?)
    }

    /// Projection onto the `x` coordinates.
    pub fn project_x(&self) -> Result<Polytope, SetError> {
        if self.ntheta() == 0 {
            return Ok(self.set.clone());
        }
        Ok(self.set.eliminate(&(0..self.nx).collect::<Vec<_>>())?)
    }
}

/// Steady-state rows of `w` in `θ`, shrunk by `lambda` about the Chebyshev
/// center of the steady-state polytope. Returned over `(x, θ)`.
fn steady_state_rows(ext: &ExtendedSystem, w: &Polytope, lambda: f64) -> Result<Polytope, SetError> {
    let nx = ext.nx();
    let nt = ext.ntheta();
    let e = ext
        .equilibrium_map()
        .ok_or(SetError::Unstable { radius: 1.0 })?;
    let a = w.normal_matrix();
    let s = a.columns(0, nx) * &e + a.columns(nx, nt);
    let steady = Polytope::new(s.clone(), w.offset().clone())?.normalize();
    let ball = steady.chebyshev_center()?;
    if ball.radius < -FEAS_TOL {
        return Err(SetError::EmptySteadyStates);
    }
    let shrunk = steady.offset() * lambda + steady.normal_matrix() * &ball.center * (1.0 - lambda);
    let mut full = DMatrix::zeros(steady.n_rows(), nx + nt);
    full.view_mut((0, nx), (steady.n_rows(), nt))
        .copy_from(steady.normal_matrix());
    Ok(Polytope::new(full, shrunk)?)
}

/// Iterates `Ω_k = Ω_{k−1} ∩ {w : Ae^k w ∈ W}` starting from `W` with
/// contracted steady-state rows, until the new rows are all redundant.
pub fn max_admissible_set(ext: &ExtendedSystem, w: &Polytope, lambda: f64, k_max: usize) -> Result<AdmissibleSet, SetError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(SetError::InvalidLambda(lambda));
    }
    if w.dim() != ext.matrix().nrows() {
        return Err(SetError::Dimension(format!(
            "W has dimension {}, extended state {}",
            w.dim(),
            ext.matrix().nrows()
        )));
    }
    let radius = spectral_radius(&ext.state_block());
    if radius >= 1.0 {
        return Err(SetError::Unstable { radius });
    }
    let w = w.normalize();
    let mut omega = if ext.ntheta() > 0 {
        w.stack(&steady_state_rows(ext, &w, lambda)?)?
    } else {
        w.clone()
    };
    omega = omega.remove_redundancy()?;
    if omega.is_empty()? {
        return Err(SetError::EmptyAdmissible);
    }
    let mut pruned_rows = omega.n_rows();
    let zero = DVector::zeros(w.dim());
    let mut power = ext.matrix().clone();
    for k in 1..=k_max {
        let candidate = w.affine_preimage(&power, &zero)?;
        let mut added = Vec::new();
        for i in 0..candidate.n_rows() {
            let row = candidate.normal_matrix().row(i).transpose();
            match omega.maximize(&row)? {
                LpOutcome::Optimal { value, .. } if value <= candidate.offset()[i] + FEAS_TOL => {}
                _ => added.push(i),
            }
        }
        if added.is_empty() {
            return Ok(AdmissibleSet {
                set: omega.remove_redundancy()?,
                k_star: k - 1,
                lambda,
                nx: ext.nx(),
            });
        }
        let new_rows = Polytope::new(
            candidate.normal_matrix().select_rows(&added),
            candidate.offset().select_rows(&added),
        )?;
        omega = omega.stack(&new_rows)?;
        // Most stacked rows end up redundant; prune once the working set doubles.
        if omega.n_rows() > 2 * pruned_rows {
            omega = omega.remove_redundancy()?;
            pruned_rows = omega.n_rows();
        }
        power = ext.matrix() * power;
    }
    Err(SetError::NotDetermined { k_max })
}

/// States from which the tail problem (stages 2 and up, every state in `X`,
/// every input in `U`) is feasible, by backward precursor recursion.
pub fn feasible_set_x02(
    spec: &MultiHorizonSpec,
    stages: &[StageSystem],
    x_set: &Polytope,
    u_set: &Polytope,
) -> Result<Polytope, SetError> {
    let nx = x_set.dim();
    let nu = u_set.dim();
    let mut s = x_set.remove_redundancy()?;
    let steps = spec.stage_of_step();
    for k in (spec.h1()..spec.n_steps()).rev() {
        let stage = stages
            .iter()
            .find(|st| st.granularity == steps[k])
            .ok_or_else(|| SetError::Dimension(format!("no stage system for granularity {}", steps[k])))?;
        let mut ab = DMatrix::zeros(nx, nx + nu);
        ab.view_mut((0, 0), (nx, nx)).copy_from(&stage.a);
        ab.view_mut((0, nx), (nx, nu)).copy_from(&stage.b);
        let next = s.affine_preimage(&ab, &DVector::zeros(nx))?;
        let lifted = lift_x(x_set, nu)?.stack(&lift_u(u_set, nx)?)?.stack(&next)?;
        s = lifted.eliminate(&(0..nx).collect::<Vec<_>>())?;
        if s.is_empty()? {
            return Err(SetError::EmptyX02);
        }
    }
    Ok(s)
}

fn lift_x(x_set: &Polytope, nu: usize) -> Result<Polytope, PolytopeError> {
    let nx = x_set.dim();
    let mut a = DMatrix::zeros(x_set.n_rows(), nx + nu);
    a.view_mut((0, 0), (x_set.n_rows(), nx)).copy_from(x_set.normal_matrix());
    Polytope::new(a, x_set.offset().clone())
}

fn lift_u(u_set: &Polytope, nx: usize) -> Result<Polytope, PolytopeError> {
    let nu = u_set.dim();
    let mut a = DMatrix::zeros(u_set.n_rows(), nx + nu);
    a.view_mut((0, nx), (u_set.n_rows(), nu)).copy_from(u_set.normal_matrix());
    Polytope::new(a, u_set.offset().clone())
}

/// Admissible set for the multi-horizon problem: `W` with `X` replaced by
/// the tail-feasible set.
pub fn build_oinf_mh(
    model: &LtiModel,
    terminal: &TerminalPair,
    basis: &SteadyStateBasis,
    x02: &Polytope,
    lambda: f64,
    k_max: usize,
) -> Result<AdmissibleSet, SetError> {
    if x02.is_empty()? {
        return Err(SetError::EmptyX02);
    }
    let w = build_w(x02, model.u_set(), &terminal.k, basis)?;
    let ext = ExtendedSystem::new(model, &terminal.k, basis);
    max_admissible_set(&ext, &w, lambda, k_max)
}

/// Whether `X₀⁽²⁾ ⊆ Proj_x(O∞^MH)`. Reported as a diagnostic only; the
/// reverse inclusion is the one that holds by construction.
pub fn x02_within_projection(x02: &Polytope, oinf: &AdmissibleSet) -> Result<bool, SetError> {
    Ok(x02.is_subset_of(&oinf.project_x()?)?)
}

/// Exact one-step invariance certificate: `Ae·S ⊆ S` via LPs.
pub fn invariance_gap(ext: &ExtendedSystem, set: &Polytope) -> Result<f64, SetError> {
    let pre = set.affine_preimage(ext.matrix(), &DVector::zeros(set.dim()))?;
    Ok(set.inclusion_gap(&pre)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub hash: String,
    pub k_star: usize,
    pub lambda: f64,
    pub nx: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedSet {
    pub meta: CacheMeta,
    pub set: Polytope,
    /// The tail-feasible set the admissible set was built from.
    pub x02: Polytope,
}

#[derive(Serialize)]
struct CacheKeyData<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    x_set: &'a Polytope,
    u_set: &'a Polytope,
    horizon: &'a [usize],
    k: &'a DMatrix<f64>,
    lambda: f64,
    k_max: usize,
}

/// Hex SHA-256 of everything that determines the multi-horizon admissible
/// set.
pub fn cache_key(model: &LtiModel, spec: &MultiHorizonSpec, k: &DMatrix<f64>, lambda: f64, k_max: usize) -> String {
    let data = CacheKeyData {
        a: model.a(),
        b: model.b(),
        x_set: model.x_set(),
        u_set: model.u_set(),
        horizon: spec.layout(),
        k,
        lambda,
        k_max,
    };
    let bytes = serde_json::to_vec(&data).expect("cache key data serializes");
    format!("{:x}", Sha256::digest(&bytes))
}

pub fn save_cached(path: &Path, hash: &str, set: &AdmissibleSet, x02: &Polytope) -> Result<(), SetError> {
    let cached = CachedSet {
        meta: CacheMeta {
            hash: hash.to_string(),
            k_star: set.k_star,
            lambda: set.lambda,
            nx: set.nx,
        },
        set: set.set.clone(),
        x02: x02.clone(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    // Write then rename so concurrent runs never observe a partial file.
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let tmp = path.with_extension(format!(
        "tmp{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::write(&tmp, serde_json::to_string_pretty(&cached)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Returns `None` when the file is missing or was built for another key.
pub fn load_cached(path: &Path, hash: &str) -> Result<Option<(AdmissibleSet, Polytope)>, SetError> {
    if !path.exists() {
        return Ok(None);
    }
    let cached: CachedSet = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if cached.meta.hash != hash {
        return Ok(None);
    }
    let set = AdmissibleSet {
        set: cached.set,
        k_star: cached.meta.k_star,
        lambda: cached.meta.lambda,
        nx: cached.meta.nx,
    };
    Ok(Some((set, cached.x02)))
}
