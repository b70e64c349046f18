//! Convex QP contract and the interior-point backend.
//!
//! Problems have the form
//! `min ½ zᵀPz + qᵀz + c  s.t.  A_eq z = b_eq,  G z ≤ h`.

use std::fmt::Write as _;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, DVector};

/// Coordinate-format sparse matrix. Duplicate entries are summed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        SparseMatrix {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        if v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    /// Add a dense block with its top-left corner at `(row, col)`.
    pub fn push_block(&mut self, row: usize, col: usize, block: &DMatrix<f64>) {
        for i in 0..block.nrows() {
            for j in 0..block.ncols() {
                self.push(row + i, col + j, block[(i, j)]);
            }
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for &(i, j, v) in &self.entries {
            d[(i, j)] += v;
        }
        d
    }

    pub fn mul_vec(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.nrows);
        for &(i, j, v) in &self.entries {
            out[i] += v * z[j];
        }
        out
    }

    fn to_csc(&self, upper_only: bool) -> CscMatrix<f64> {
        let (mut ii, mut jj, mut vv) = (Vec::new(), Vec::new(), Vec::new());
        for &(i, j, v) in &self.entries {
            if upper_only && i > j {
                continue;
            }
            ii.push(i);
            jj.push(j);
            vv.push(v);
        }
        CscMatrix::new_from_triplets(self.nrows, self.ncols, ii, jj, vv)
    }
}

/// Where each block of the decision vector lives:
/// `z = [x_0 … x_N, u_0 … u_{N−1}, θ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QpLayout {
    pub nx: usize,
    pub nu: usize,
    pub ntheta: usize,
    pub n_steps: usize,
}

impl QpLayout {
    pub fn n_vars(&self) -> usize {
        (self.n_steps + 1) * self.nx + self.n_steps * self.nu + self.ntheta
    }
    pub fn x(&self, k: usize) -> usize {
        k * self.nx
    }
    pub fn u(&self, k: usize) -> usize {
        (self.n_steps + 1) * self.nx + k * self.nu
    }
    pub fn theta(&self) -> usize {
        (self.n_steps + 1) * self.nx + self.n_steps * self.nu
    }

    pub fn split(&self, z: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, DVector<f64>) {
        let xs = (0..=self.n_steps).map(|k| z.rows(self.x(k), self.nx).into_owned()).collect();
        let us = (0..self.n_steps).map(|k| z.rows(self.u(k), self.nu).into_owned()).collect();
        (xs, us, z.rows(self.theta(), self.ntheta).into_owned())
    }

    pub fn assemble(&self, xs: &[DVector<f64>], us: &[DVector<f64>], theta: &DVector<f64>) -> DVector<f64> {
        assert_eq!(xs.len(), self.n_steps + 1);
        assert_eq!(us.len(), self.n_steps);
        let mut z = DVector::zeros(self.n_vars());
        for (k, x) in xs.iter().enumerate() {
            z.rows_mut(self.x(k), self.nx).copy_from(x);
        }
        for (k, u) in us.iter().enumerate() {
            z.rows_mut(self.u(k), self.nu).copy_from(u);
        }
        z.rows_mut(self.theta(), self.ntheta).copy_from(theta);
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Symmetric; both triangles stored.
    pub hessian: SparseMatrix,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub eq: SparseMatrix,
    pub eq_rhs: DVector<f64>,
    pub ineq: SparseMatrix,
    pub ineq_rhs: DVector<f64>,
    pub layout: Option<QpLayout>,
}

impl QpProblem {
    pub fn n_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&self.hessian.mul_vec(z)) + self.linear.dot(z) + self.constant
    }

    /// Largest equality residual and inequality violation at `z`.
    pub fn residuals(&self, z: &DVector<f64>) -> (f64, f64) {
        let eq = (self.eq.mul_vec(z) - &self.eq_rhs).amax();
        let ineq = (self.ineq.mul_vec(z) - &self.ineq_rhs).max().max(0.0);
        (if self.eq_rhs.is_empty() { 0.0 } else { eq }, if self.ineq_rhs.is_empty() { 0.0 } else { ineq })
    }

    /// Plain-text triplet dump for cross-checking with an external solver.
    /// Sections `P`, `q`, `Aeq`, `beq`, `G`, `h`; one `i j value` line per
    /// matrix entry and one `i value` line per vector entry.
    pub fn to_triplet_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# n={} n_eq={} n_ineq={} constant={}", self.n_vars(), self.eq.nrows, self.ineq.nrows, self.constant);
        let mat = |s: &mut String, name: &str, m: &SparseMatrix| {
            let _ = writeln!(s, "{name} {} {} {}", m.nrows, m.ncols, m.nnz());
            for &(i, j, v) in &m.entries {
                let _ = writeln!(s, "{i} {j} {v}");
            }
        };
        let vec = |s: &mut String, name: &str, v: &DVector<f64>| {
            let _ = writeln!(s, "{name} {}", v.len());
            for (i, x) in v.iter().enumerate() {
                let _ = writeln!(s, "{i} {x}");
            }
        };
        mat(&mut s, "P", &self.hessian);
        vec(&mut s, "q", &self.linear);
        mat(&mut s, "Aeq", &self.eq);
        vec(&mut s, "beq", &self.eq_rhs);
        mat(&mut s, "G", &self.ineq);
        vec(&mut s, "h", &self.ineq_rhs);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    SolverError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// Wall-clock seconds spent inside the backend call.
    pub solve_time: f64,
}

pub trait QpBackend: Send + Sync {
    /// `warm_start` is advisory; backends may ignore it.
    fn solve(&self, qp: &QpProblem, warm_start: Option<&DVector<f64>>) -> QpSolution;
}

/// Interior-point backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClarabelBackend {
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        ClarabelBackend { tol: 1e-8, max_iter: 200 }
    }
}

impl QpBackend for ClarabelBackend {
    fn solve(&self, qp: &QpProblem, _warm_start: Option<&DVector<f64>>) -> QpSolution {
        let n = qp.n_vars();
        let p = qp.hessian.to_csc(true);
        let mut a = SparseMatrix::new(qp.eq.nrows + qp.ineq.nrows, n);
        a.entries.extend(qp.eq.entries.iter().copied());
        a.entries
            .extend(qp.ineq.entries.iter().map(|&(i, j, v)| (i + qp.eq.nrows, j, v)));
        let a = a.to_csc(false);
        let b: Vec<f64> = qp.eq_rhs.iter().chain(qp.ineq_rhs.iter()).copied().collect();
        let mut cones = Vec::new();
        if qp.eq.nrows > 0 {
            cones.push(SupportedConeT::ZeroConeT(qp.eq.nrows));
        }
        if qp.ineq.nrows > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(qp.ineq.nrows));
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(self.max_iter)
            .tol_gap_abs(self.tol)
            .tol_gap_rel(self.tol)
            .tol_feas(self.tol)
            .build()
            .expect("static solver settings are valid");
        let failed = |solve_time| QpSolution {
            primal: DVector::zeros(n),
            objective: f64::NAN,
            status: QpStatus::SolverError,
            solve_time,
        };
        let start = Instant::now();
        let mut solver = match DefaultSolver::new(&p, qp.linear.as_slice(), &a, &b, &cones, settings) {
            Ok(s) => s,
            Err(_) => return failed(start.elapsed().as_secs_f64()),
        };
        solver.solve();
        let solve_time = start.elapsed().as_secs_f64();
        let status = match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => QpStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => QpStatus::Infeasible,
            _ => QpStatus::SolverError,
        };
        let primal = DVector::from_vec(solver.solution.x.clone());
        let objective = if status == QpStatus::Optimal { qp.objective(&primal) } else { f64::NAN };
        QpSolution {
            primal,
            objective,
            status,
            solve_time,
        }
    }
}
