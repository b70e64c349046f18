//! Halfspace polytopes `{z : A z <= b}`.
//!
//! All tolerance tests are performed on row-normalized data, so a single
//! feasibility tolerance means the same thing for every set regardless of
//! how its rows were scaled when it was built.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{self, LpError, LpOutcome};

/// Global feasibility tolerance applied to normalized rows.
pub const FEAS_TOL: f64 = 1e-8;

/// Rows whose normal has a smaller Euclidean norm are treated as zero.
const ZERO_NORMAL: f64 = 1e-12;

/// Cap on the Chebyshev radius so that unbounded sets give a finite LP.
const RADIUS_CAP: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("polytope data contains non-finite values")]
    NonFinite,
    #[error("coordinate index {index} out of range for dimension {dim}")]
    Index { index: usize, dim: usize },
    #[error("set is empty or has no interior (chebyshev radius {radius:e})")]
    Degenerate { radius: f64 },
    #[error("set is unbounded along a sampled direction")]
    Unbounded,
    #[error(transparent)]
    Lp(#[from] LpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChebyshevBall {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl ChebyshevBall {
    /// Radius at or below tolerance: empty or lower-dimensional.
    pub fn is_degenerate(&self) -> bool {
        self.radius <= FEAS_TOL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Polytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, PolytopeError> {
        if a.nrows() != b.len() {
            return Err(PolytopeError::Dimension(format!(
                "{} constraint rows but {} offsets",
                a.nrows(),
                b.len()
            )));
        }
        if a.ncols() == 0 {
            return Err(PolytopeError::Dimension("polytope dimension must be positive".into()));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(PolytopeError::NonFinite);
        }
        Ok(Polytope { a, b })
    }

    /// The whole space `R^dim` (no constraints).
    pub fn universe(dim: usize) -> Self {
        Polytope {
            a: DMatrix::zeros(0, dim),
            b: DVector::zeros(0),
        }
    }

    /// Canonical empty set: `z_0 <= -1` and `-z_0 <= -1`.
    pub fn empty(dim: usize) -> Self {
        let mut a = DMatrix::zeros(2, dim);
        a[(0, 0)] = 1.0;
        a[(1, 0)] = -1.0;
        Polytope {
            a,
            b: DVector::from_element(2, -1.0),
        }
    }

    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self, PolytopeError> {
        if lower.len() != upper.len() {
            return Err(PolytopeError::Dimension(format!(
                "box bounds of length {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        let d = lower.len();
        let mut a = DMatrix::zeros(2 * d, d);
        let mut b = DVector::zeros(2 * d);
        for i in 0..d {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = upper[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lower[i];
        }
        Polytope::new(a, b)
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn normal_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.b
    }

    fn check_point(&self, z: &DVector<f64>) -> Result<(), PolytopeError> {
        if z.len() != self.dim() {
            return Err(PolytopeError::Dimension(format!(
                "point of length {} for a {}-dimensional set",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_same_dim(&self, other: &Polytope) -> Result<(), PolytopeError> {
        if self.dim() != other.dim() {
            return Err(PolytopeError::Dimension(format!(
                "sets of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }

    /// Scale each row to a unit normal. Trivially satisfied zero rows are
    /// dropped; a violated zero row collapses the set to [`Polytope::empty`].
    pub fn normalize(&self) -> Polytope {
        let mut rows = Vec::with_capacity(self.n_rows());
        for i in 0..self.n_rows() {
            let row = self.a.row(i);
            let norm = row.norm();
            if norm <= ZERO_NORMAL {
                if self.b[i] < -FEAS_TOL {
                    return Polytope::empty(self.dim());
                }
                continue;
            }
            rows.push((row.transpose() / norm, self.b[i] / norm));
        }
        self.with_rows(rows)
    }

    fn with_rows(&self, rows: Vec<(DVector<f64>, f64)>) -> Polytope {
        let d = self.dim();
        let mut a = DMatrix::zeros(rows.len(), d);
        let mut b = DVector::zeros(rows.len());
        for (i, (n, off)) in rows.into_iter().enumerate() {
            a.set_row(i, &n.transpose());
            b[i] = off;
        }
        Polytope { a, b }
    }

    /// Largest normalized constraint residual at `z` (non-positive inside).
    pub fn violation(&self, z: &DVector<f64>) -> Result<f64, PolytopeError> {
        self.check_point(z)?;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.n_rows() {
            let row = self.a.row(i);
            let norm = row.norm();
            let r = row.dot(&z.transpose()) - self.b[i];
            let r = if norm > ZERO_NORMAL { r / norm } else { r };
            worst = worst.max(r);
        }
        Ok(worst)
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> Result<bool, PolytopeError> {
        Ok(self.violation(z)? <= tol)
    }

    /// Stack the rows of both sets without pruning.
    pub fn stack(&self, other: &Polytope) -> Result<Polytope, PolytopeError> {
        self.check_same_dim(other)?;
        let d = self.dim();
        let n = self.n_rows() + other.n_rows();
        let mut a = DMatrix::zeros(n, d);
        a.rows_mut(0, self.n_rows()).copy_from(&self.a);
        a.rows_mut(self.n_rows(), other.n_rows()).copy_from(&other.a);
        let mut b = DVector::zeros(n);
        b.rows_mut(0, self.n_rows()).copy_from(&self.b);
        b.rows_mut(self.n_rows(), other.n_rows()).copy_from(&other.b);
        Ok(Polytope { a, b })
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope, PolytopeError> {
        self.stack(other)?.remove_redundancy()
    }

    /// `{z : M z + c ∈ self}`. Rows are normalized but not pruned.
    pub fn affine_preimage(&self, m: &DMatrix<f64>, c: &DVector<f64>) -> Result<Polytope, PolytopeError> {
        if m.nrows() != self.dim() || c.len() != self.dim() {
            return Err(PolytopeError::Dimension(format!(
                "map {}x{} with shift {} into a {}-dimensional set",
                m.nrows(),
                m.ncols(),
                c.len(),
                self.dim()
            )));
        }
        let a = &self.a * m;
        let b = &self.b - &self.a * c;
        Ok(Polytope::new(a, b)?.normalize())
    }

    /// Maximize `direction · z` over the set.
    pub fn maximize(&self, direction: &DVector<f64>) -> Result<LpOutcome, PolytopeError> {
        self.check_point(direction)?;
        Ok(lp::maximize(direction, &self.a, &self.b, None)?)
    }

    pub fn chebyshev_center(&self) -> Result<ChebyshevBall, PolytopeError> {
        let p = self.normalize();
        let d = p.dim();
        let mut a = DMatrix::zeros(p.n_rows(), d + 1);
        a.view_mut((0, 0), (p.n_rows(), d)).copy_from(&p.a);
        a.column_mut(d).fill(1.0);
        let mut obj = DVector::zeros(d + 1);
        obj[d] = 1.0;
        let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); d + 1];
        bounds[d] = (f64::NEG_INFINITY, RADIUS_CAP);
        match lp::maximize(&obj, &a, &p.b, Some(&bounds))? {
            LpOutcome::Optimal { point, value } => Ok(ChebyshevBall {
                center: point.rows(0, d).into_owned(),
                radius: value,
            }),
            other => Err(LpError::Backend(format!("chebyshev LP returned {other:?}")).into()),
        }
    }

    pub fn is_empty(&self) -> Result<bool, PolytopeError> {
        Ok(self.chebyshev_center()?.radius < -FEAS_TOL)
    }

    /// Drop duplicate and LP-certified redundant rows. The result is
    /// normalized; an empty input yields [`Polytope::empty`].
    pub fn remove_redundancy(&self) -> Result<Polytope, PolytopeError> {
        let p = dedupe(&self.normalize());
        if p.n_rows() == 0 {
            return Ok(p);
        }
        if p.is_empty()? {
            return Ok(Polytope::empty(p.dim()));
        }
        let n = p.n_rows();
        let mut keep = vec![true; n];
        for i in 0..n {
            let idx: Vec<usize> = (0..n).filter(|&j| keep[j]).collect();
            let mut a = DMatrix::zeros(idx.len(), p.dim());
            let mut b = DVector::zeros(idx.len());
            for (r, &j) in idx.iter().enumerate() {
                a.set_row(r, &p.a.row(j));
                b[r] = if j == i { p.b[j] + 1.0 } else { p.b[j] };
            }
            let obj = p.a.row(i).transpose();
            match lp::maximize(&obj, &a, &b, None)? {
                LpOutcome::Optimal { value, .. } => {
                    if value <= p.b[i] + FEAS_TOL {
                        keep[i] = false;
                    }
                }
                LpOutcome::Unbounded => {
                    return Err(LpError::Backend("redundancy LP unbounded despite relaxed cap".into()).into())
                }
                LpOutcome::Infeasible => {
                    return Err(LpError::Backend("redundancy LP infeasible on a nonempty set".into()).into())
                }
            }
        }
        let rows = (0..n)
            .filter(|&i| keep[i])
            .map(|i| (p.a.row(i).transpose(), p.b[i]))
            .collect();
        Ok(p.with_rows(rows))
    }

    /// Largest normalized amount by which `self` sticks out of `other`:
    /// `max_i (sup_{z∈self} a_i z − b_i)` over the rows of `other`.
    /// `-inf` when `self` is empty, `+inf` when unbounded along a row.
    pub fn inclusion_gap(&self, other: &Polytope) -> Result<f64, PolytopeError> {
        self.check_same_dim(other)?;
        if self.is_empty()? {
            return Ok(f64::NEG_INFINITY);
        }
        let other = other.normalize();
        let mut gap = f64::NEG_INFINITY;
        for i in 0..other.n_rows() {
            let dir = other.a.row(i).transpose();
            match self.maximize(&dir)? {
                LpOutcome::Optimal { value, .. } => gap = gap.max(value - other.b[i]),
                LpOutcome::Unbounded => return Ok(f64::INFINITY),
                LpOutcome::Infeasible => return Ok(f64::NEG_INFINITY),
            }
        }
        Ok(gap)
    }

    pub fn is_subset_of(&self, other: &Polytope) -> Result<bool, PolytopeError> {
        Ok(self.inclusion_gap(other)? <= FEAS_TOL)
    }

    /// Set equality by mutual inclusion.
    pub fn set_eq(&self, other: &Polytope) -> Result<bool, PolytopeError> {
        Ok(self.is_subset_of(other)? && other.is_subset_of(self)?)
    }

    /// Projection onto the coordinates in `keep` (output in ascending index
    /// order) by Fourier–Motzkin elimination of every other coordinate, with
    /// redundancy removal after each eliminated variable.
    pub fn eliminate(&self, keep: &[usize]) -> Result<Polytope, PolytopeError> {
        let d = self.dim();
        for &k in keep {
            if k >= d {
                return Err(PolytopeError::Index { index: k, dim: d });
            }
        }
        let mut keep: Vec<usize> = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if keep.is_empty() {
            return Err(PolytopeError::Dimension("projection must keep at least one coordinate".into()));
        }
        // `cols[c]` is the original index of current column c.
        let mut cols: Vec<usize> = (0..d).collect();
        let mut current = self.remove_redundancy()?;
        loop {
            let candidates: Vec<usize> = (0..cols.len())
                .filter(|&c| keep.binary_search(&cols[c]).is_err())
                .collect();
            if candidates.is_empty() {
                break;
            }
            let col = *candidates
                .iter()
                .min_by_key(|&&c| {
                    let (pos, neg) = sign_counts(&current, c);
                    (pos * neg) as i64 - (pos + neg) as i64
                })
                .unwrap();
            current = eliminate_column(&current, col)?;
            cols.remove(col);
        }
        Ok(current)
    }

    /// Hit-and-run samples started from the Chebyshev center.
    pub fn hit_and_run<R: Rng + ?Sized>(
        &self,
        count: usize,
        burn_in: usize,
        thin: usize,
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>, PolytopeError> {
        let ball = self.chebyshev_center()?;
        if ball.is_degenerate() {
            return Err(PolytopeError::Degenerate { radius: ball.radius });
        }
        let p = self.normalize();
        let d = p.dim();
        let mut x = ball.center;
        let thin = thin.max(1);
        let mut out = Vec::with_capacity(count);
        let mut step = 0usize;
        while out.len() < count {
            let dir = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let dir = dir.normalize();
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for i in 0..p.n_rows() {
                let ad = p.a.row(i).dot(&dir.transpose());
                let slack = p.b[i] - p.a.row(i).dot(&x.transpose());
                if ad > 1e-14 {
                    hi = hi.min(slack / ad);
                } else if ad < -1e-14 {
                    lo = lo.max(slack / ad);
                }
            }
            if !lo.is_finite() || !hi.is_finite() {
                return Err(PolytopeError::Unbounded);
            }
            let t = if hi > lo { rng.random_range(lo..hi) } else { 0.0 };
            x += dir * t;
            step += 1;
            if step > burn_in && (step - burn_in).is_multiple_of(thin) {
                out.push(x.clone());
            }
        }
        Ok(out)
    }
}

fn sign_counts(p: &Polytope, col: usize) -> (usize, usize) {
    let mut pos = 0;
    let mut neg = 0;
    for i in 0..p.n_rows() {
        let v = p.a[(i, col)];
        if v > ZERO_NORMAL {
            pos += 1;
        } else if v < -ZERO_NORMAL {
            neg += 1;
        }
    }
    (pos, neg)
}

/// One Fourier–Motzkin step: eliminate column `col`, return the set in the
/// remaining coordinates.
fn eliminate_column(p: &Polytope, col: usize) -> Result<Polytope, PolytopeError> {
    let d = p.dim();
    if d == 1 {
        return Err(PolytopeError::Dimension("cannot eliminate the last coordinate".into()));
    }
    let drop_col = |row: DVector<f64>| -> DVector<f64> { row.remove_row(col) };
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut rows = Vec::new();
    for i in 0..p.n_rows() {
        let v = p.a[(i, col)];
        let row = p.a.row(i).transpose();
        if v > ZERO_NORMAL {
            pos.push((row / v, p.b[i] / v));
        } else if v < -ZERO_NORMAL {
            neg.push((row / -v, p.b[i] / -v));
        } else {
            rows.push((drop_col(row), p.b[i]));
        }
    }
    // Screen each combination against the source set before the pairwise
    // redundancy pass: a combination whose support over `p` falls short of
    // its offset cannot be a facet of the projection.
    let mut witnesses: Vec<DVector<f64>> = Vec::new();
    let bbox = bounding_box(p)?;
    for (rp, bp) in &pos {
        for (rn, bn) in &neg {
            let mut combined = rp + rn;
            combined[col] = 0.0;
            let off = bp + bn;
            let scale = combined.norm();
            if scale <= ZERO_NORMAL {
                if off < -FEAS_TOL {
                    rows.push((drop_col(combined), off));
                }
                continue;
            }
            if let Some((lo, hi)) = &bbox {
                let support: f64 = (0..d).map(|k| (combined[k] * lo[k]).max(combined[k] * hi[k])).sum();
                if support < off - FEAS_TOL * scale {
                    continue;
                }
            }
            let tight = witnesses.iter().any(|w| combined.dot(w) >= off - FEAS_TOL * scale);
            if !tight {
                match lp::maximize(&combined, &p.a, &p.b, None)? {
                    LpOutcome::Optimal { point, value } => {
                        let hit = value >= off - FEAS_TOL * scale;
                        witnesses.push(point);
                        if !hit {
                            continue;
                        }
                    }
                    LpOutcome::Infeasible => return Ok(Polytope::empty(d - 1)),
                    LpOutcome::Unbounded => {}
                }
            }
            rows.push((drop_col(combined), off));
        }
    }
    let reduced = Polytope::universe(d - 1).with_rows(rows);
    reduced.remove_redundancy()
}

/// Per-coordinate `(lower, upper)` bounds.
type Bounds = (Vec<f64>, Vec<f64>);

/// Axis-aligned bounds of `p`, or `None` if unbounded along some axis.
fn bounding_box(p: &Polytope) -> Result<Option<Bounds>, PolytopeError> {
    let d = p.dim();
    let (mut lo, mut hi) = (vec![0.0; d], vec![0.0; d]);
    for k in 0..d {
        for sign in [1.0, -1.0] {
            let mut dir = DVector::zeros(d);
            dir[k] = sign;
            match lp::maximize(&dir, &p.a, &p.b, None)? {
                LpOutcome::Optimal { value, .. } => {
                    if sign > 0.0 {
                        hi[k] = value;
                    } else {
                        lo[k] = -value;
                    }
                }
                _ => return Ok(None),
            }
        }
    }
    Ok(Some((lo, hi)))
}

/// Merge rows whose normalized normals coincide, keeping the tightest offset.
fn dedupe(p: &Polytope) -> Polytope {
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::with_capacity(p.n_rows());
    'outer: for i in 0..p.n_rows() {
        let n = p.a.row(i).transpose();
        for (m, off) in rows.iter_mut() {
            if (m.clone() - &n).amax() <= 1e-12 {
                *off = off.min(p.b[i]);
                continue 'outer;
            }
        }
        rows.push((n, p.b[i]));
    }
    p.with_rows(rows)
}

#[derive(Serialize, Deserialize)]
struct PolytopeJson {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
}

impl Serialize for Polytope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let a = (0..self.n_rows())
            .map(|i| self.a.row(i).iter().copied().collect())
            .collect();
        PolytopeJson {
            a,
            b: self.b.iter().copied().collect(),
            dim: (self.n_rows() == 0).then_some(self.dim()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Polytope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = PolytopeJson::deserialize(d)?;
        let dim = match (raw.a.first(), raw.dim) {
            (Some(r), _) => r.len(),
            (None, Some(dim)) => dim,
            (None, None) => return Err(D::Error::custom("empty constraint list needs \"dim\"")),
        };
        if raw.a.iter().any(|r| r.len() != dim) {
            return Err(D::Error::custom("ragged constraint matrix"));
        }
        let a = DMatrix::from_row_iterator(raw.a.len(), dim, raw.a.into_iter().flatten());
        Polytope::new(a, DVector::from_vec(raw.b)).map_err(D::Error::custom)
    }
}
