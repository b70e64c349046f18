//! Multi-horizon tracking MPC: problem assembly, solving and extraction.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::plant::{
    stage_systems, steady_state_basis, terminal_pair, LtiModel, MultiHorizonSpec, PlantError, StageSystem,
    SteadyStateBasis, TerminalPair,
};
use crate::linalg::is_positive_definite;
use crate::polytope::Polytope;
use crate::qp::{ClarabelBackend, QpBackend, QpLayout, QpProblem, QpSolution, QpStatus, SparseMatrix};
use crate::sets::{build_oinf_mh, feasible_set_x02, AdmissibleSet, SetError};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite state or reference")]
    NonFinite,
    #[error("tracking problem is infeasible")]
    Infeasible,
    #[error("QP backend failed")]
    SolverError,
    #[error("{0} must be symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Sets(#[from] SetError),
}

/// Everything needed to pose the tracking problem at any `(x, r)`.
#[derive(Debug, Clone)]
pub struct TrackingOcp {
    pub model: LtiModel,
    pub spec: MultiHorizonSpec,
    pub stages: Vec<StageSystem>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub terminal: TerminalPair,
    pub basis: SteadyStateBasis,
    pub x02: Polytope,
    pub oinf: AdmissibleSet,
}

impl TrackingOcp {
    /// Build all ingredients, including the admissible set.
    pub fn new(
        model: LtiModel,
        spec: MultiHorizonSpec,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        t: DMatrix<f64>,
        lambda: f64,
        k_max: usize,
    ) -> Result<Self, MpcError> {
        let terminal = terminal_pair(&model, &q, &r)?;
        let basis = steady_state_basis(&model)?;
        let stages = stage_systems(&model, &q, &r, &spec);
        let x02 = feasible_set_x02(&spec, &stages, model.x_set(), model.u_set())?;
        let oinf = build_oinf_mh(&model, &terminal, &basis, &x02, lambda, k_max)?;
        Self::from_parts(model, spec, q, r, t, terminal, basis, x02, oinf)
    }

    /// Assemble from precomputed parts (e.g. a cached admissible set).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        model: LtiModel,
        spec: MultiHorizonSpec,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        t: DMatrix<f64>,
        terminal: TerminalPair,
        basis: SteadyStateBasis,
        x02: Polytope,
        oinf: AdmissibleSet,
    ) -> Result<Self, MpcError> {
        if !is_positive_definite(&t) {
            return Err(MpcError::NotPositiveDefinite("T"));
        }
        let nx = model.nx();
        if t.nrows() != nx || oinf.nx != nx || oinf.ntheta() != basis.ntheta() || x02.dim() != nx {
            return Err(MpcError::Dimension("cost, sets and basis disagree with the model".into()));
        }
        let stages = stage_systems(&model, &q, &r, &spec);
        Ok(TrackingOcp {
            model,
            spec,
            stages,
            q,
            r,
            t,
            terminal,
            basis,
            x02,
            oinf,
        })
    }

    pub fn layout(&self) -> QpLayout {
        QpLayout {
            nx: self.model.nx(),
            nu: self.model.nu(),
            ntheta: self.basis.ntheta(),
            n_steps: self.spec.n_steps(),
        }
    }

    fn stage(&self, granularity: usize) -> &StageSystem {
        &self.stages[granularity - 1]
    }
}

/// Adds `‖S z − c‖²_W` to `(H, q, constant)` where `S` picks the block at
/// `col` (identity) minus `sub` applied to `θ`.
fn add_tracking_term(
    h: &mut SparseMatrix,
    theta_block: &mut DMatrix<f64>,
    col: usize,
    theta: usize,
    weight: &DMatrix<f64>,
    sub: &DMatrix<f64>,
) {
    let wm = weight * sub;
    h.push_block(col, col, &(weight * 2.0));
    h.push_block(col, theta, &(&wm * -2.0));
    h.push_block(theta, col, &(wm.transpose() * -2.0));
    *theta_block += sub.transpose() * &wm * 2.0;
}

/// Sparse QP for the tracking problem at `(x0, reference)`.
pub fn build_ocp(ocp: &TrackingOcp, x0: &DVector<f64>, reference: &DVector<f64>) -> Result<QpProblem, MpcError> {
    let layout = ocp.layout();
    let (nx, nt, n) = (layout.nx, layout.ntheta, layout.n_steps);
    if x0.len() != nx || reference.len() != nx {
        return Err(MpcError::Dimension(format!(
            "state {} and reference {} for a {nx}-state model",
            x0.len(),
            reference.len()
        )));
    }
    if x0.iter().chain(reference.iter()).any(|v| !v.is_finite()) {
        return Err(MpcError::NonFinite);
    }
    let nv = layout.n_vars();
    let th = layout.theta();
    let mx = ocp.basis.mx();
    let mu = ocp.basis.mu();
    let steps = ocp.spec.stage_of_step();

    let mut h = SparseMatrix::new(nv, nv);
    let mut linear = DVector::zeros(nv);
    let mut theta_block = DMatrix::zeros(nt, nt);
    for (k, &i) in steps.iter().enumerate() {
        let st = ocp.stage(i);
        add_tracking_term(&mut h, &mut theta_block, layout.x(k), th, &st.q, &mx);
        add_tracking_term(&mut h, &mut theta_block, layout.u(k), th, &st.r, &mu);
    }
    add_tracking_term(&mut h, &mut theta_block, layout.x(n), th, &ocp.terminal.p, &mx);
    // offset cost ‖M_xθ − r‖²_T
    theta_block += mx.transpose() * &ocp.t * &mx * 2.0;
    h.push_block(th, th, &theta_block);
    linear
        .rows_mut(th, nt)
        .copy_from(&(mx.transpose() * &ocp.t * reference * -2.0));
    let constant = reference.dot(&(&ocp.t * reference));

    let mut eq = SparseMatrix::new((n + 1) * nx, nv);
    let mut eq_rhs = DVector::zeros((n + 1) * nx);
    eq.push_block(0, layout.x(0), &DMatrix::identity(nx, nx));
    eq_rhs.rows_mut(0, nx).copy_from(x0);
    for (k, &i) in steps.iter().enumerate() {
        let st = ocp.stage(i);
        let row = (k + 1) * nx;
        eq.push_block(row, layout.x(k + 1), &DMatrix::identity(nx, nx));
        eq.push_block(row, layout.x(k), &(-&st.a));
        eq.push_block(row, layout.u(k), &(-&st.b));
    }

    let xs = ocp.model.x_set();
    let us = ocp.model.u_set();
    let os = &ocp.oinf.set;
    let n_ineq = (n + 1) * xs.n_rows() + n * us.n_rows() + os.n_rows();
    let mut ineq = SparseMatrix::new(n_ineq, nv);
    let mut ineq_rhs = DVector::zeros(n_ineq);
    let mut row = 0;
    for k in 0..=n {
        ineq.push_block(row, layout.x(k), xs.normal_matrix());
        ineq_rhs.rows_mut(row, xs.n_rows()).copy_from(xs.offset());
        row += xs.n_rows();
    }
    for k in 0..n {
        ineq.push_block(row, layout.u(k), us.normal_matrix());
        ineq_rhs.rows_mut(row, us.n_rows()).copy_from(us.offset());
        row += us.n_rows();
    }
    let oa = os.normal_matrix();
    ineq.push_block(row, layout.x(ocp.spec.h1()), &oa.columns(0, nx).into_owned());
    ineq.push_block(row, th, &oa.columns(nx, nt).into_owned());
    ineq_rhs.rows_mut(row, os.n_rows()).copy_from(os.offset());

    Ok(QpProblem {
        hessian: h,
        linear,
        constant,
        eq,
        eq_rhs,
        ineq,
        ineq_rhs,
        layout: Some(layout),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub u_traj: Vec<DVector<f64>>,
    pub x_traj: Vec<DVector<f64>>,
    pub theta: DVector<f64>,
    pub xbar: DVector<f64>,
    pub ubar: DVector<f64>,
    pub cost: f64,
    pub solve_time: f64,
    pub h1: usize,
}

impl OcpSolution {
    /// The first `h₁` inputs, i.e. what gets transmitted.
    pub fn packet_slice(&self) -> &[DVector<f64>] {
        &self.u_traj[..self.h1]
    }
}

pub fn extract(ocp: &TrackingOcp, layout: &QpLayout, sol: &QpSolution) -> Result<OcpSolution, MpcError> {
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => return Err(MpcError::Infeasible),
        QpStatus::SolverError => return Err(MpcError::SolverError),
    }
    if sol.primal.len() != layout.n_vars() {
        return Err(MpcError::Dimension("primal length does not match layout".into()));
    }
    let (x_traj, u_traj, theta) = layout.split(&sol.primal);
    let (xbar, ubar) = ocp.basis.lift(&theta);
    Ok(OcpSolution {
        u_traj,
        x_traj,
        theta,
        xbar,
        ubar,
        cost: sol.objective,
        solve_time: sol.solve_time,
        h1: ocp.spec.h1(),
    })
}

/// Largest residual of the stage dynamics along an extracted solution.
pub fn dynamics_residual(ocp: &TrackingOcp, sol: &OcpSolution) -> f64 {
    ocp.spec
        .stage_of_step()
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let st = ocp.stage(i);
            (&sol.x_traj[k + 1] - &st.a * &sol.x_traj[k] - &st.b * &sol.u_traj[k]).amax()
        })
        .fold(0.0, f64::max)
}

/// A tracking problem bound to a QP backend.
pub struct MpcController {
    pub ocp: TrackingOcp,
    backend: Box<dyn QpBackend>,
}

impl std::fmt::Debug for MpcController {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MpcController").field("spec", &self.ocp.spec).finish_non_exhaustive()
    }
}

impl MpcController {
    pub fn new(ocp: TrackingOcp, backend: Box<dyn QpBackend>) -> Self {
        MpcController { ocp, backend }
    }

    pub fn with_tolerance(ocp: TrackingOcp, tol: f64) -> Self {
        Self::new(
            ocp,
            Box::new(ClarabelBackend {
                tol,
                ..ClarabelBackend::default()
            }),
        )
    }

    pub fn solve(&self, x0: &DVector<f64>, reference: &DVector<f64>) -> Result<OcpSolution, MpcError> {
        let qp = build_ocp(&self.ocp, x0, reference)?;
        let sol = self.backend.solve(&qp, None);
        extract(&self.ocp, &self.ocp.layout(), &sol)
    }
}

/// Regulation variant with terminal set `X_f` and terminal cost `P`
/// (no steady-state parametrization), used as a reference formulation.
pub fn build_regulation_qp(
    model: &LtiModel,
    spec: &MultiHorizonSpec,
    stages: &[StageSystem],
    p: &DMatrix<f64>,
    terminal_set: &Polytope,
    x0: &DVector<f64>,
) -> QpProblem {
    let layout = QpLayout {
        nx: model.nx(),
        nu: model.nu(),
        ntheta: 0,
        n_steps: spec.n_steps(),
    };
    let (nx, n) = (layout.nx, layout.n_steps);
    let nv = layout.n_vars();
    let steps = spec.stage_of_step();
    let mut h = SparseMatrix::new(nv, nv);
    for (k, &i) in steps.iter().enumerate() {
        h.push_block(layout.x(k), layout.x(k), &(&stages[i - 1].q * 2.0));
        h.push_block(layout.u(k), layout.u(k), &(&stages[i - 1].r * 2.0));
    }
    h.push_block(layout.x(n), layout.x(n), &(p * 2.0));

    let mut eq = SparseMatrix::new((n + 1) * nx, nv);
    let mut eq_rhs = DVector::zeros((n + 1) * nx);
    eq.push_block(0, 0, &DMatrix::identity(nx, nx));
    eq_rhs.rows_mut(0, nx).copy_from(x0);
    for (k, &i) in steps.iter().enumerate() {
        let row = (k + 1) * nx;
        eq.push_block(row, layout.x(k + 1), &DMatrix::identity(nx, nx));
        eq.push_block(row, layout.x(k), &(-&stages[i - 1].a));
        eq.push_block(row, layout.u(k), &(-&stages[i - 1].b));
    }

    let xs = model.x_set();
    let us = model.u_set();
    let n_ineq = n * (xs.n_rows() + us.n_rows()) + terminal_set.n_rows();
    let mut ineq = SparseMatrix::new(n_ineq, nv);
    let mut ineq_rhs = DVector::zeros(n_ineq);
    let mut row = 0;
    for k in 0..n {
        ineq.push_block(row, layout.x(k), xs.normal_matrix());
        ineq_rhs.rows_mut(row, xs.n_rows()).copy_from(xs.offset());
        row += xs.n_rows();
        ineq.push_block(row, layout.u(k), us.normal_matrix());
        ineq_rhs.rows_mut(row, us.n_rows()).copy_from(us.offset());
        row += us.n_rows();
    }
    ineq.push_block(row, layout.x(n), terminal_set.normal_matrix());
    ineq_rhs.rows_mut(row, terminal_set.n_rows()).copy_from(terminal_set.offset());

    QpProblem {
        hessian: h,
        linear: DVector::zeros(nv),
        constant: 0.0,
        eq,
        eq_rhs,
        ineq,
        ineq_rhs,
        layout: Some(layout),
    }
}
