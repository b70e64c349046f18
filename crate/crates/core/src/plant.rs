//! Linear plant model, multi-horizon stage machinery, steady-state
//! parametrization, terminal ingredients and the simulated truth plant.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{is_positive_definite, matrix_power, pbh_rank, solve_discrete_lyapunov, spectral_radius};
use crate::polytope::{Polytope, PolytopeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("(A, B) is not stabilizable: uncontrollable mode with |λ| = {modulus:.6}")]
    NotStabilizable { modulus: f64 },
    #[error("{0} constraint set is empty or has no interior")]
    DegenerateConstraints(&'static str),
    #[error("invalid horizon layout: {0}")]
    InvalidHorizon(String),
    #[error("null space of [A-I B] is numerically ambiguous; singular values {singular_values:?}")]
    RankAmbiguous { singular_values: Vec<f64> },
    #[error("{0} must be symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("Riccati iteration did not converge after {iterations} iterations")]
    RiccatiDiverged { iterations: usize },
    #[error("sampling time must be positive, got {0}")]
    InvalidSampleTime(f64),
    #[error("plant state diverged (norm {norm:e} above bound {bound:e})")]
    Diverged { norm: f64, bound: f64 },
    #[error("non-finite input or state")]
    NonFinite,
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

/// Discrete-time LTI plant `x⁺ = A x + B u` with polytopic constraints.
#[derive(Debug, Clone)]
pub struct LtiModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    ts: f64,
    x_set: Polytope,
    u_set: Polytope,
}

impl LtiModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        ts: f64,
        x_set: Polytope,
        u_set: Polytope,
    ) -> Result<Self, PlantError> {
        let n = a.nrows();
        if !a.is_square() || b.nrows() != n || b.ncols() == 0 {
            return Err(PlantError::Dimension(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if x_set.dim() != n || u_set.dim() != b.ncols() {
            return Err(PlantError::Dimension(format!(
                "X has dimension {}, U has dimension {}",
                x_set.dim(),
                u_set.dim()
            )));
        }
        if !(ts > 0.0) {
            return Err(PlantError::InvalidSampleTime(ts));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(PlantError::NonFinite);
        }
        for l in a.complex_eigenvalues().iter() {
            if l.norm() >= 1.0 && pbh_rank(&a, &b, *l) < n {
                return Err(PlantError::NotStabilizable { modulus: l.norm() });
            }
        }
        if x_set.chebyshev_center()?.is_degenerate() {
            return Err(PlantError::DegenerateConstraints("state"));
        }
        if u_set.chebyshev_center()?.is_degenerate() {
            return Err(PlantError::DegenerateConstraints("input"));
        }
        Ok(LtiModel { a, b, ts, x_set, u_set })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn ts(&self) -> f64 {
        self.ts
    }
    pub fn x_set(&self) -> &Polytope {
        &self.x_set
    }
    pub fn u_set(&self) -> &Polytope {
        &self.u_set
    }
    pub fn nx(&self) -> usize {
        self.a.nrows()
    }
    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// `(A_i, B_i)` holding the input constant for `i` base steps.
pub fn coarse_matrices(a: &DMatrix<f64>, b: &DMatrix<f64>, i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    assert!(i >= 1, "granularity must be at least 1");
    let mut bi = DMatrix::zeros(b.nrows(), b.ncols());
    let mut aj = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..i {
        bi += &aj * b;
        aj = a * &aj;
    }
    (aj, bi)
}

/// `Q_i = iQ`, `R_i = iR`.
pub fn stage_costs(q: &DMatrix<f64>, r: &DMatrix<f64>, i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (q * i as f64, r * i as f64)
}

/// Horizon division `H = [h₁, h₂, …]`: `hᵢ` steps of granularity `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MultiHorizonSpec {
    layout: Vec<usize>,
    stage_of_step: Vec<usize>,
}

impl TryFrom<Vec<usize>> for MultiHorizonSpec {
    type Error = PlantError;
    fn try_from(h: Vec<usize>) -> Result<Self, PlantError> {
        horizon_layout(&h)
    }
}

impl From<MultiHorizonSpec> for Vec<usize> {
    fn from(s: MultiHorizonSpec) -> Vec<usize> {
        s.layout
    }
}

pub fn horizon_layout(h: &[usize]) -> Result<MultiHorizonSpec, PlantError> {
    match h.first() {
        None => return Err(PlantError::InvalidHorizon("empty horizon vector".into())),
        Some(0) => {
            return Err(PlantError::InvalidHorizon(
                "h1 must be at least 1 (the admissible-set constraint sits at step h1)".into(),
            ))
        }
        _ => {}
    }
    let stage_of_step = h
        .iter()
        .enumerate()
        .flat_map(|(i, &hi)| std::iter::repeat_n(i + 1, hi))
        .collect();
    Ok(MultiHorizonSpec {
        layout: h.to_vec(),
        stage_of_step,
    })
}

impl MultiHorizonSpec {
    pub fn uniform(n: usize) -> Result<Self, PlantError> {
        horizon_layout(&[n])
    }

    pub fn layout(&self) -> &[usize] {
        &self.layout
    }

    /// Total number of prediction steps `N = Σ hᵢ`.
    pub fn n_steps(&self) -> usize {
        self.stage_of_step.len()
    }

    /// Look-ahead in base sampling periods, `Σ i·hᵢ`.
    pub fn physical_len(&self) -> usize {
        self.stage_of_step.iter().sum()
    }

    pub fn h1(&self) -> usize {
        self.layout[0]
    }

    pub fn stage_of_step(&self) -> &[usize] {
        &self.stage_of_step
    }

    /// Granularities with at least one step, ascending.
    pub fn granularities(&self) -> Vec<usize> {
        self.layout
            .iter()
            .enumerate()
            .filter(|(_, &h)| h > 0)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn is_uniform(&self) -> bool {
        self.layout.iter().skip(1).all(|&h| h == 0)
    }

    /// Compact label such as `5-4-3-2`.
    pub fn label(&self) -> String {
        self.layout.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("-")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSystem {
    pub granularity: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl StageSystem {
    pub fn new(model: &LtiModel, q: &DMatrix<f64>, r: &DMatrix<f64>, i: usize) -> Self {
        let (a, b) = coarse_matrices(model.a(), model.b(), i);
        let (q, r) = stage_costs(q, r, i);
        StageSystem {
            granularity: i,
            a,
            b,
            q,
            r,
        }
    }
}

/// One stage system per granularity appearing in `spec`; indexed by `i - 1`
/// (entries for unused granularities are still built, they are cheap).
pub fn stage_systems(model: &LtiModel, q: &DMatrix<f64>, r: &DMatrix<f64>, spec: &MultiHorizonSpec) -> Vec<StageSystem> {
    (1..=spec.layout().len())
        .map(|i| StageSystem::new(model, q, r, i))
        .collect()
}

/// Orthonormal basis `M = [M_x; M_u]` of the null space of `[A − I  B]`;
/// steady pairs are `(x̄, ū) = M θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateBasis {
    m: DMatrix<f64>,
    nx: usize,
}

impl SteadyStateBasis {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
    pub fn ntheta(&self) -> usize {
        self.m.ncols()
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn mx(&self) -> DMatrix<f64> {
        self.m.rows(0, self.nx).into_owned()
    }
    pub fn mu(&self) -> DMatrix<f64> {
        self.m.rows(self.nx, self.m.nrows() - self.nx).into_owned()
    }

    pub fn lift(&self, theta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let z = &self.m * theta;
        let nu = self.m.nrows() - self.nx;
        (z.rows(0, self.nx).into_owned(), z.rows(self.nx, nu).into_owned())
    }

    /// Least-squares coordinates of a steady pair.
    pub fn coordinates(&self, xbar: &DVector<f64>, ubar: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.m.nrows());
        z.rows_mut(0, self.nx).copy_from(xbar);
        z.rows_mut(self.nx, ubar.len()).copy_from(ubar);
        self.m.transpose() * z
    }
}

pub fn steady_state_basis(model: &LtiModel) -> Result<SteadyStateBasis, PlantError> {
    let n = model.nx();
    let m = model.nu();
    let mut padded = DMatrix::zeros(n + m, n + m);
    padded
        .view_mut((0, 0), (n, n))
        .copy_from(&(model.a() - DMatrix::identity(n, n)));
    padded.view_mut((0, n), (n, m)).copy_from(model.b());
    let svd = SVD::new(padded, false, true);
    let v_t = svd.v_t.expect("requested V");
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let smax = sv.iter().cloned().fold(0.0, f64::max).max(1.0);
    let null_tol = 1e-10 * smax;
    let clear_tol = 1e-6 * smax;
    if sv.iter().any(|&s| s > null_tol && s < clear_tol) {
        return Err(PlantError::RankAmbiguous { singular_values: sv });
    }
    let cols: Vec<DVector<f64>> = sv
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= null_tol)
        .map(|(i, _)| {
            let mut v = v_t.row(i).transpose();
            // deterministic sign: first significant entry positive
            if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
                if *first < 0.0 {
                    v = -v;
                }
            }
            v
        })
        .collect();
    if cols.is_empty() {
        return Err(PlantError::RankAmbiguous { singular_values: sv });
    }
    Ok(SteadyStateBasis {
        m: DMatrix::from_columns(&cols),
        nx: n,
    })
}

/// Stabilizing gain `K` (closed loop `A − BK`, law `u = K(x̄ − x) + ū`) and
/// terminal weight `P` solving `(A−BK)ᵀP(A−BK) + Q + KᵀRK = P`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalPair {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl TerminalPair {
    pub fn closed_loop(&self, model: &LtiModel) -> DMatrix<f64> {
        model.a() - model.b() * &self.k
    }

    /// Frobenius-max residual of the terminal Lyapunov equation.
    pub fn lyapunov_residual(&self, model: &LtiModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
        let acl = self.closed_loop(model);
        (acl.transpose() * &self.p * &acl + q + self.k.transpose() * r * &self.k - &self.p).amax()
    }
}

pub fn terminal_pair(model: &LtiModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<TerminalPair, PlantError> {
    if q.nrows() != model.nx() || r.nrows() != model.nu() {
        return Err(PlantError::Dimension(format!(
            "Q is {}x{}, R is {}x{}",
            q.nrows(),
            q.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    if !is_positive_definite(q) {
        return Err(PlantError::NotPositiveDefinite("Q"));
    }
    if !is_positive_definite(r) {
        return Err(PlantError::NotPositiveDefinite("R"));
    }
    let (a, b) = (model.a(), model.b());
    let at = a.transpose();
    let bt = b.transpose();
    let max_iter = 200_000;
    let mut p = q.clone();
    let mut converged = false;
    for _ in 0..max_iter {
        let btp = &bt * &p;
        let gain_inv = (r + &btp * b).cholesky().ok_or(PlantError::RiccatiDiverged { iterations: 0 })?;
        let k = gain_inv.solve(&(&btp * a));
        let next = q + &at * &p * a - &at * &p * b * &k;
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &p).amax();
        if !delta.is_finite() {
            break;
        }
        p = next;
        if delta <= 1e-13 * p.amax().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(PlantError::RiccatiDiverged { iterations: max_iter });
    }
    let k = (r + &bt * &p * b)
        .cholesky()
        .ok_or(PlantError::RiccatiDiverged { iterations: max_iter })?
        .solve(&(&bt * &p * a));
    let acl = a - b * &k;
    if spectral_radius(&acl) >= 1.0 {
        return Err(PlantError::RiccatiDiverged { iterations: max_iter });
    }
    let p = solve_discrete_lyapunov(&acl, &(q + k.transpose() * r * &k))
        .ok_or(PlantError::RiccatiDiverged { iterations: max_iter })?;
    Ok(TerminalPair { k, p })
}

/// Exact zero-order-hold discretization via the block matrix exponential.
pub fn zoh_discretize(
    ac: &DMatrix<f64>,
    bc: &DMatrix<f64>,
    ts: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), PlantError> {
    if !(ts > 0.0) {
        return Err(PlantError::InvalidSampleTime(ts));
    }
    let n = ac.nrows();
    let m = bc.ncols();
    if !ac.is_square() || bc.nrows() != n {
        return Err(PlantError::Dimension("continuous pair has inconsistent shapes".into()));
    }
    let mut blk = DMatrix::zeros(n + m, n + m);
    blk.view_mut((0, 0), (n, n)).copy_from(&(ac * ts));
    blk.view_mut((0, n), (n, m)).copy_from(&(bc * ts));
    let e = blk.exp();
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    ))
}

/// Frictionless cart-pole. State `(p, ṗ, φ, φ̇)` with `φ = 0` upright,
/// input the horizontal force on the cart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Distance from pivot to the pole's center of mass.
    pub half_length: f64,
    pub gravity: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            gravity: 9.81,
        }
    }
}

impl CartPoleParams {
    pub fn derivative(&self, x: &DVector<f64>, force: f64) -> DVector<f64> {
        let total = self.cart_mass + self.pole_mass;
        let (phi, omega) = (x[2], x[3]);
        let (s, c) = phi.sin_cos();
        let tmp = (force + self.pole_mass * self.half_length * omega * omega * s) / total;
        let phi_acc = (self.gravity * s - c * tmp)
            / (self.half_length * (4.0 / 3.0 - self.pole_mass * c * c / total));
        let p_acc = tmp - self.pole_mass * self.half_length * phi_acc * c / total;
        DVector::from_vec(vec![x[1], p_acc, omega, phi_acc])
    }

    /// Continuous-time linearization at the upright equilibrium.
    pub fn linearize(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let total = self.cart_mass + self.pole_mass;
        let ml = self.pole_mass * self.half_length;
        let den = self.half_length * (4.0 / 3.0 - self.pole_mass / total);
        let ac = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, -ml * self.gravity / (total * den), 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                0.0, 0.0, self.gravity / den, 0.0,
            ],
        );
        let bc = DMatrix::from_column_slice(
            4,
            1,
            &[0.0, 1.0 / total + ml / (total * total * den), 0.0, -1.0 / (total * den)],
        );
        (ac, bc)
    }

    /// Classical RK4 over `ts` split into `substeps` with constant force.
    pub fn rk4(&self, x: &DVector<f64>, force: f64, ts: f64, substeps: usize) -> DVector<f64> {
        let h = ts / substeps.max(1) as f64;
        let mut x = x.clone();
        for _ in 0..substeps.max(1) {
            let k1 = self.derivative(&x, force);
            let k2 = self.derivative(&(&x + &k1 * (h / 2.0)), force);
            let k3 = self.derivative(&(&x + &k2 * (h / 2.0)), force);
            let k4 = self.derivative(&(&x + &k3 * h), force);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        x
    }
}

/// Which dynamics the simulated plant actually follows.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantKind {
    Linear { a: DMatrix<f64>, b: DMatrix<f64> },
    CartPole { params: CartPoleParams, ts: f64, substeps: usize },
}

/// Simulated truth plant with a divergence guard.
#[derive(Debug, Clone)]
pub struct TruthPlant {
    pub kind: PlantKind,
    pub divergence_bound: f64,
}

impl TruthPlant {
    pub fn is_linear(&self) -> bool {
        matches!(self.kind, PlantKind::Linear { .. })
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, PlantError> {
        if x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
            return Err(PlantError::NonFinite);
        }
        let next = plant_step(&self.kind, x, u);
        let norm = next.norm();
        if !norm.is_finite() || norm > self.divergence_bound {
            return Err(PlantError::Diverged {
                norm,
                bound: self.divergence_bound,
            });
        }
        Ok(next)
    }
}

pub fn plant_step(kind: &PlantKind, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    match kind {
        PlantKind::Linear { a, b } => a * x + b * u,
        PlantKind::CartPole { params, ts, substeps } => params.rk4(x, u[0], *ts, *substeps),
    }
}

/// `Aᵏ` convenience re-export for callers that build extended systems.
pub fn power(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    matrix_power(a, k)
}
