//! Thin linear-programming layer used by the polytope routines.
//!
//! Every LP here has the shape `max c·z  s.t.  A z <= b` with free `z`,
//! which is all the set computations need.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("LP backend failure: {0}")]
    Backend(String),
    #[error("LP dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { point: DVector<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

impl LpOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            LpOutcome::Optimal { value, .. } => Some(*value),
            _ => None,
        }
    }
}

/// Maximize `objective · z` subject to `a z <= b`, optionally with extra
/// per-variable bounds.
pub fn maximize(
    objective: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    bounds: Option<&[(f64, f64)]>,
) -> Result<LpOutcome, LpError> {
    let dim = objective.len();
    if a.ncols() != dim || a.nrows() != b.len() {
        return Err(LpError::Dimension(format!(
            "objective {dim}, rows {}x{}, offsets {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = (0..dim)
        .map(|j| {
            let bnd = bounds
                .map(|bs| bs[j])
                .unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
            problem.add_var(objective[j], bnd)
        })
        .collect();
    for i in 0..a.nrows() {
        let terms: Vec<_> = (0..dim)
            .filter(|&j| a[(i, j)] != 0.0)
            .map(|j| (vars[j], a[(i, j)]))
            .collect();
        if terms.is_empty() {
            if b[i] < 0.0 {
                return Ok(LpOutcome::Infeasible);
            }
            continue;
        }
        problem.add_constraint(terms.as_slice(), ComparisonOp::Le, b[i]);
    }
    match problem.solve() {
        Ok(outcome) => match outcome.solution() {
            Some(sol) => {
                let point = DVector::from_iterator(dim, vars.iter().map(|v| sol.var_value(*v)));
                Ok(LpOutcome::Optimal {
                    value: objective.dot(&point),
                    point,
                })
            }
            None => Err(LpError::Backend("solve interrupted".into())),
        },
        Err(microlp::Error::Infeasible) => Ok(LpOutcome::Infeasible),
        Err(microlp::Error::Unbounded) => Ok(LpOutcome::Unbounded),
        Err(e) => Err(LpError::Backend(e.to_string())),
    }
}

/// Feasibility of `a z <= b`; returns a witness when feasible.
pub fn feasible_point(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Option<DVector<f64>>, LpError> {
    let zero = DVector::zeros(a.ncols());
    match maximize(&zero, a, b, None)? {
        LpOutcome::Optimal { point, .. } => Ok(Some(point)),
        LpOutcome::Infeasible => Ok(None),
        LpOutcome::Unbounded => Err(LpError::Backend("zero objective reported unbounded".into())),
    }
}
