//! Models and brute-force oracles shared by the integration tests and the
//! acceptance harness. The oracles avoid the library's own assembly code.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use netmpc::lp::feasible_point;
use netmpc::plant::{zoh_discretize, CartPoleParams, LtiModel};
use netmpc::polytope::Polytope;
use netmpc::qp::{ClarabelBackend, QpBackend, QpProblem, QpStatus, SparseMatrix};

pub fn double_integrator() -> LtiModel {
    LtiModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
        1.0,
        Polytope::from_box(&[-5.0, -2.0], &[5.0, 2.0]).unwrap(),
        Polytope::from_box(&[-1.0], &[1.0]).unwrap(),
    )
    .unwrap()
}

pub fn di_costs() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    (DMatrix::identity(2, 2), DMatrix::identity(1, 1), DMatrix::identity(2, 2) * 100.0)
}

pub fn cart_pole(ts: f64) -> LtiModel {
    let (ac, bc) = CartPoleParams::default().linearize();
    let (a, b) = zoh_discretize(&ac, &bc, ts).unwrap();
    LtiModel::new(
        a,
        b,
        ts,
        Polytope::from_box(&[-2.0, -3.0, -0.3, -3.0], &[2.0, 3.0, 0.3, 3.0]).unwrap(),
        Polytope::from_box(&[-10.0], &[10.0]).unwrap(),
    )
    .unwrap()
}

pub fn cart_pole_costs() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 1.0, 10.0, 1.0])),
        DMatrix::identity(1, 1) * 0.1,
        DMatrix::identity(4, 4) * 100.0,
    )
}

/// `(Aⁱ, Σ_{j<i} Aʲ B)` by repeated stepping.
pub fn coarse(a: &DMatrix<f64>, b: &DMatrix<f64>, i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut ai = DMatrix::identity(a.nrows(), a.nrows());
    let mut bi = DMatrix::zeros(b.nrows(), b.ncols());
    for _ in 0..i {
        bi = a * &bi + b;
        ai = a * ai;
    }
    (ai, bi)
}

/// Granularity of every step after the first segment of `layout`.
pub fn tail_granularities(layout: &[usize]) -> Vec<usize> {
    layout
        .iter()
        .enumerate()
        .skip(1)
        .flat_map(|(i, &h)| std::iter::repeat_n(i + 1, h))
        .collect()
}

/// Whether the tail problem started at `z` admits inputs keeping every
/// state in `X` and input in `U`: one LP over all tail states and inputs.
pub fn x02_member_by_lp(model: &LtiModel, layout: &[usize], z: &DVector<f64>) -> bool {
    let (nx, nu) = (model.nx(), model.nu());
    let grans = tail_granularities(layout);
    let steps = grans.len();
    // variables: x_1..x_steps then u_0..u_{steps-1}; x_0 = z is substituted.
    let nv = steps * nx + steps * nu;
    let xi = |k: usize| (k - 1) * nx;
    let ui = |k: usize| steps * nx + k * nu;
    let (xa, xb) = (model.x_set().normal_matrix(), model.x_set().offset());
    let (ua, ub) = (model.u_set().normal_matrix(), model.u_set().offset());
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    if model.x_set().violation(z).unwrap() > 1e-9 {
        return false;
    }
    for k in 1..=steps {
        for r in 0..xa.nrows() {
            let mut row = DVector::zeros(nv);
            row.rows_mut(xi(k), nx).copy_from(&xa.row(r).transpose());
            rows.push((row, xb[r]));
        }
    }
    for k in 0..steps {
        for r in 0..ua.nrows() {
            let mut row = DVector::zeros(nv);
            row.rows_mut(ui(k), nu).copy_from(&ua.row(r).transpose());
            rows.push((row, ub[r]));
        }
    }
    // x_{k+1} − A_i x_k − B_i u_k = 0 as a pair of inequalities.
    for (k, &g) in grans.iter().enumerate() {
        let (ai, bi) = coarse(model.a(), model.b(), g);
        for r in 0..nx {
            let mut row = DVector::zeros(nv);
            row[xi(k + 1) + r] = 1.0;
            let mut rhs = 0.0;
            if k == 0 {
                rhs += (ai.row(r) * z)[0];
            } else {
                for c in 0..nx {
                    row[xi(k) + c] -= ai[(r, c)];
                }
            }
            for c in 0..nu {
                row[ui(k) + c] -= bi[(r, c)];
            }
            rows.push((row.clone(), rhs + 1e-9));
            rows.push((-row, -rhs + 1e-9));
        }
    }
    let mut a = DMatrix::zeros(rows.len(), nv);
    let mut b = DVector::zeros(rows.len());
    for (i, (row, rhs)) in rows.into_iter().enumerate() {
        a.set_row(i, &row.transpose());
        b[i] = rhs;
    }
    feasible_point(&a, &b).unwrap().is_some()
}

/// Condensed uniform-horizon tracking MPC: inputs and the steady pair
/// `s = (x̄, ū)` are the only unknowns, states are eliminated, `s` is tied to
/// the equilibrium equation by equality rows and to the terminal set through
/// `θ = Mᵀs`.
pub struct CondensedTracking {
    pub model: LtiModel,
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// Orthonormal basis of the steady-state pairs.
    pub m: DMatrix<f64>,
    /// Terminal set over `(x_N, θ)`.
    pub terminal: Polytope,
}

impl CondensedTracking {
    /// Returns `(objective, u₀)` or `None` when infeasible.
    pub fn solve(&self, x0: &DVector<f64>, reference: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let (a, b) = (self.model.a(), self.model.b());
        let (nx, nu, n) = (self.model.nx(), self.model.nu(), self.horizon);
        let ns = nx + nu;
        let nv = n * nu + ns;
        let sx = {
            let mut s = DMatrix::zeros(nx, nv);
            s.view_mut((0, n * nu), (nx, nx)).copy_from(&DMatrix::identity(nx, nx));
            s
        };
        let su = {
            let mut s = DMatrix::zeros(nu, nv);
            s.view_mut((0, n * nu + nx), (nu, nu)).copy_from(&DMatrix::identity(nu, nu));
            s
        };
        // x_k = phi[k] x0 + gam[k] z
        let mut phi = vec![DMatrix::identity(nx, nx)];
        let mut gam = vec![DMatrix::zeros(nx, nv)];
        for k in 0..n {
            let mut g = a * &gam[k];
            let mut blk = g.view_mut((0, k * nu), (nx, nu));
            blk += b;
            gam.push(g);
            phi.push(a * &phi[k]);
        }
        let uk = |k: usize| {
            let mut s = DMatrix::zeros(nu, nv);
            s.view_mut((0, k * nu), (nu, nu)).copy_from(&DMatrix::identity(nu, nu));
            s
        };
        let mut h = DMatrix::zeros(nv, nv);
        let mut f = DVector::zeros(nv);
        let mut c = 0.0;
        let mut quad = |e: &DMatrix<f64>, off: &DVector<f64>, w: &DMatrix<f64>| {
            h += e.transpose() * w * e * 2.0;
            f += e.transpose() * w * off * 2.0;
            c += off.dot(&(w * off));
        };
        for k in 0..n {
            quad(&(&gam[k] - &sx), &(&phi[k] * x0), &self.q);
            quad(&(uk(k) - &su), &DVector::zeros(nu), &self.r);
        }
        quad(&(&gam[n] - &sx), &(&phi[n] * x0), &self.p);
        quad(&sx, &(-reference), &self.t);

        let mut eq = DMatrix::zeros(nx, nv);
        let am = a - DMatrix::identity(nx, nx);
        eq.view_mut((0, n * nu), (nx, nx)).copy_from(&am);
        eq.view_mut((0, n * nu + nx), (nx, nu)).copy_from(b);

        let mut ineq_rows: Vec<DMatrix<f64>> = Vec::new();
        let mut ineq_rhs: Vec<DVector<f64>> = Vec::new();
        let (xa, xb) = (self.model.x_set().normal_matrix(), self.model.x_set().offset());
        let (ua, ub) = (self.model.u_set().normal_matrix(), self.model.u_set().offset());
        for k in 1..=n {
            ineq_rows.push(xa * &gam[k]);
            ineq_rhs.push(xb - xa * (&phi[k] * x0));
        }
        for k in 0..n {
            ineq_rows.push(ua * uk(k));
            ineq_rhs.push(ub.clone());
        }
        let ot = self.terminal.normal_matrix();
        let ox = ot.columns(0, nx).into_owned();
        let oth = ot.columns(nx, ot.ncols() - nx).into_owned();
        let mut s_sel = DMatrix::zeros(ns, nv);
        s_sel.view_mut((0, n * nu), (ns, ns)).copy_from(&DMatrix::identity(ns, ns));
        ineq_rows.push(&ox * &gam[n] + &oth * self.m.transpose() * &s_sel);
        ineq_rhs.push(self.terminal.offset() - &ox * (&phi[n] * x0));

        let to_sparse = |m: &DMatrix<f64>| {
            let mut s = SparseMatrix::new(m.nrows(), m.ncols());
            s.push_block(0, 0, m);
            s
        };
        let g = stack_rows(&ineq_rows);
        let qp = QpProblem {
            hessian: to_sparse(&h),
            linear: f,
            constant: c,
            eq: to_sparse(&eq),
            eq_rhs: DVector::zeros(nx),
            ineq: to_sparse(&g),
            ineq_rhs: stack_vecs(&ineq_rhs),
            layout: None,
        };
        let sol = ClarabelBackend { tol: 1e-10, max_iter: 400 }.solve(&qp, None);
        if sol.status != QpStatus::Optimal {
            return None;
        }
        let z = polish(&h, &qp.linear, &eq, &g, &qp.ineq_rhs, &sol.primal).unwrap_or(sol.primal);
        Some((qp.objective(&z), z.rows(0, nu).into_owned()))
    }
}

/// Refine an interior-point solution `z` of `min ½zᵀHz + fᵀz` s.t. `Ez = 0`,
/// `Gz ≤ h` by a few primal-dual active-set iterations started from its
/// near-active rows. Returns `None` if they do not settle on a KKT point.
fn polish(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    e: &DMatrix<f64>,
    g: &DMatrix<f64>,
    rhs: &DVector<f64>,
    z: &DVector<f64>,
) -> Option<DVector<f64>> {
    let slack = rhs - g * z;
    let mut active: Vec<usize> = (0..g.nrows()).filter(|&i| slack[i] < 1e-6 * (1.0 + rhs[i].abs())).collect();
    let (nv, ne) = (z.len(), e.nrows());
    for _ in 0..20 {
        let m = ne + active.len();
        let mut act = DMatrix::zeros(m, nv);
        act.rows_mut(0, ne).copy_from(e);
        let mut b = DVector::zeros(nv + m);
        b.rows_mut(0, nv).copy_from(&(-f));
        for (j, &i) in active.iter().enumerate() {
            act.row_mut(ne + j).copy_from(&g.row(i));
            b[nv + ne + j] = rhs[i];
        }
        let mut kkt = DMatrix::zeros(nv + m, nv + m);
        kkt.view_mut((0, 0), (nv, nv)).copy_from(h);
        kkt.view_mut((0, nv), (nv, m)).copy_from(&act.transpose());
        kkt.view_mut((nv, 0), (m, nv)).copy_from(&act);
        let sol = kkt.svd(true, true).solve(&b, 1e-12).ok()?;
        let zp = sol.rows(0, nv).into_owned();
        // multipliers enter as Hz + f + Aᵀν = 0, so inequality rows need ν ≥ 0
        let (worst_dual, j) = (0..active.len()).map(|j| (sol[nv + ne + j], j)).fold((0.0, 0), |a, b| if b.0 < a.0 { b } else { a });
        let viol = g * &zp - rhs;
        let (i, worst_row) = viol.argmax();
        if worst_row > 1e-9 {
            active.push(i);
        } else if worst_dual < -1e-8 {
            active.remove(j);
        } else if (e * &zp).amax() <= 1e-9 {
            return Some(zp);
        } else {
            return None;
        }
    }
    None
}

fn stack_rows(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let ncols = blocks[0].ncols();
    let nrows = blocks.iter().map(DMatrix::nrows).sum();
    let mut out = DMatrix::zeros(nrows, ncols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), ncols)).copy_from(b);
        r += b.nrows();
    }
    out
}

fn stack_vecs(blocks: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(blocks.iter().map(|v| v.len()).sum(), blocks.iter().flat_map(|v| v.iter().copied()))
}

/// `(A, B, Q, R)`.
pub type Stage = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

/// Backward Riccati recursion over time-varying stages `(A, B, Q, R)` with
/// terminal weight `P`: optimal cost `x0ᵀS₀x0` and first input.
pub fn riccati_regulation(
    stages: &[Stage],
    p: &DMatrix<f64>,
    x0: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let mut s = p.clone();
    let mut gain = DMatrix::zeros(0, 0);
    for (a, b, q, r) in stages.iter().rev() {
        let bts = b.transpose() * &s;
        gain = (r + &bts * b).try_inverse().unwrap() * &bts * a;
        s = q + a.transpose() * &s * a - a.transpose() * &s * b * &gain;
    }
    (x0.dot(&(&s * x0)), -(&gain * x0))
}

/// Hit-and-run members of `set`, stepped with the auxiliary law written out
/// from the model: returns the worst normalized violation of the set after
/// one step, and of the lifted constraints (`x ∈ state_set`, `u ∈ U`).
pub fn invariance_and_admissibility(
    model: &LtiModel,
    k: &DMatrix<f64>,
    basis: &netmpc::plant::SteadyStateBasis,
    set: &netmpc::sets::AdmissibleSet,
    state_set: &Polytope,
    count: usize,
    seed: u64,
) -> (f64, f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let nx = model.nx();
    let samples = set.set.hit_and_run(count, 200, 5, &mut rng).unwrap();
    let (mut inv, mut adm) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for w in samples {
        let x = w.rows(0, nx).into_owned();
        let theta = w.rows(nx, w.len() - nx).into_owned();
        let (xbar, ubar) = basis.lift(&theta);
        let u = k * (&xbar - &x) + &ubar;
        let x_next = model.a() * &x + model.b() * &u;
        let mut w_next = w.clone();
        w_next.rows_mut(0, nx).copy_from(&x_next);
        inv = inv.max(set.set.violation(&w_next).unwrap());
        adm = adm
            .max(state_set.violation(&x).unwrap())
            .max(model.u_set().violation(&u).unwrap());
    }
    (inv, adm)
}
