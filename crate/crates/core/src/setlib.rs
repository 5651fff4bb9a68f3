//! Set representations and the arithmetic the verifier is built from.
//!
//! A [`Zonotope`] `Z(c, G) = { c + G·β | β ∈ [-1, 1]^q }` is the propagated set. Every
//! set seen during propagation is an image of the same latent hypercube, so bounds on
//! the factors `β` (a [`FactorBox`], optionally cut by a [`ConstraintSet`]) translate
//! directly into bounds on inputs, hidden values, and outputs.
//!
//! Sign convention used throughout: `pos(A) = max(A, 0)` and `neg(A) = min(A, 0)`, so
//! the minimum of `a·β` over `[l, u]` is `pos(a)·l + neg(a)·u`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Absolute tolerance for feasibility and emptiness decisions.
pub const EMPTY_TOL: f64 = 1e-9;

fn all_finite<'a>(it: impl IntoIterator<Item = &'a f64>) -> bool {
    it.into_iter().all(|v| v.is_finite())
}

/// `c + G·β` with `β ∈ [-1, 1]^q`; one generator per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Zonotope {
    center: DVector<f64>,
    generators: DMatrix<f64>,
}

impl Zonotope {
    pub fn new(center: DVector<f64>, generators: DMatrix<f64>) -> Result<Self> {
        if center.len() != generators.nrows() {
            return Err(Error::Dimension(format!(
                "zonotope center has length {} but generators have {} rows",
                center.len(),
                generators.nrows()
            )));
        }
        if !all_finite(center.iter()) || !all_finite(generators.iter()) {
            return Err(Error::NonFinite("zonotope".into()));
        }
        Ok(Self { center, generators })
    }

    /// The point set `{c}`.
    pub fn point(center: DVector<f64>) -> Self {
        let n = center.len();
        Self { center, generators: DMatrix::zeros(n, 0) }
    }

    /// Axis-aligned box as a zonotope with one generator per dimension, kept even for
    /// zero-width dimensions so that factor `i` always belongs to input `i`.
    pub fn from_interval(iv: &Interval) -> Self {
        let center = iv.midpoint();
        let generators = DMatrix::from_diagonal(&iv.radius());
        Self { center, generators }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn num_generators(&self) -> usize {
        self.generators.ncols()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn generators(&self) -> &DMatrix<f64> {
        &self.generators
    }

    /// Point of the set for factor vector `beta`.
    pub fn eval(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.center + &self.generators * beta
    }

    pub(crate) fn from_parts_unchecked(center: DVector<f64>, generators: DMatrix<f64>) -> Self {
        debug_assert_eq!(center.len(), generators.nrows());
        Self { center, generators }
    }
}

/// Box `[lower, upper]`. Any `lower > upper` means the set is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Interval {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension(format!(
                "interval bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if !all_finite(lower.iter()) || !all_finite(upper.iter()) {
            return Err(Error::NonFinite("interval".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.iter().zip(self.upper.iter()).any(|(l, u)| l > u)
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.upper + &self.lower) * 0.5
    }

    pub fn radius(&self) -> DVector<f64> {
        (&self.upper - &self.lower) * 0.5
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(v, (l, u))| v.clamp(*l, *u)),
        )
    }
}

/// Halfspace intersection `{ y | A·y ≤ b }`.
#[derive(Debug, Clone, PartialEq)]
pub struct HPolytope {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl HPolytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Dimension(format!(
                "polytope has {} rows but offset has length {}",
                a.nrows(),
                b.len()
            )));
        }
        if !all_finite(a.iter()) || !all_finite(b.iter()) {
            return Err(Error::NonFinite("polytope".into()));
        }
        Ok(Self { a, b })
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    /// All rows satisfied up to `tol`.
    pub fn contains(&self, y: &DVector<f64>, tol: f64) -> bool {
        let ay = &self.a * y;
        ay.iter().zip(self.b.iter()).all(|(lhs, rhs)| *lhs <= rhs + tol)
    }
}

/// Bounds on the latent factors; always a non-empty subset of `[-1, 1]^q`.
/// Operations that can prove emptiness return `Option<FactorBox>` with `None` as Empty.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorBox {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl FactorBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension(format!(
                "factor box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(upper.iter()).enumerate() {
            if !l.is_finite() || !u.is_finite() {
                return Err(Error::NonFinite(format!("factor box dimension {i}")));
            }
            if *l < -1.0 - EMPTY_TOL || *u > 1.0 + EMPTY_TOL || l > u {
                return Err(Error::Invalid(format!(
                    "factor box dimension {i} has bounds [{l}, {u}] outside [-1, 1] or reversed"
                )));
            }
        }
        let lower = lower.map(|v| v.max(-1.0));
        let upper = upper.map(|v| v.min(1.0));
        Ok(Self { lower, upper })
    }

    /// The full hypercube `[-1, 1]^q`.
    pub fn unit(q: usize) -> Self {
        Self { lower: DVector::from_element(q, -1.0), upper: DVector::from_element(q, 1.0) }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.upper + &self.lower) * 0.5
    }

    pub fn radius(&self) -> DVector<f64> {
        (&self.upper - &self.lower) * 0.5
    }

    /// Sum of half-widths.
    pub fn radius_sum(&self) -> f64 {
        self.radius().sum()
    }

    pub fn contains(&self, beta: &DVector<f64>, tol: f64) -> bool {
        beta.len() == self.dim()
            && beta
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    pub fn is_subset_of(&self, other: &FactorBox, tol: f64) -> bool {
        self.dim() == other.dim()
            && (0..self.dim())
                .all(|i| self.lower[i] >= other.lower[i] - tol && self.upper[i] <= other.upper[i] + tol)
    }

    pub fn approx_eq(&self, other: &FactorBox, tol: f64) -> bool {
        self.is_subset_of(other, tol) && other.is_subset_of(self, tol)
    }

    /// The first `n` factors.
    pub fn prefix(&self, n: usize) -> FactorBox {
        FactorBox { lower: self.lower.rows(0, n).into_owned(), upper: self.upper.rows(0, n).into_owned() }
    }

    /// This box followed by `extra` unconstrained factors.
    pub fn extended(&self, extra: usize) -> FactorBox {
        let q = self.dim() + extra;
        let lower = DVector::from_fn(q, |i, _| if i < self.dim() { self.lower[i] } else { -1.0 });
        let upper = DVector::from_fn(q, |i, _| if i < self.dim() { self.upper[i] } else { 1.0 });
        FactorBox { lower, upper }
    }

    /// Restrict dimension `i` to `[lower, upper]` (intersected with the current bounds).
    pub fn with_dim(&self, i: usize, lower: f64, upper: f64) -> Option<FactorBox> {
        let mut out = self.clone();
        out.lower[i] = out.lower[i].max(lower);
        out.upper[i] = out.upper[i].min(upper);
        if out.lower[i] > out.upper[i] {
            None
        } else {
            Some(out)
        }
    }

    /// Map a box expressed in the fresh coordinates `β'` of [`FactorBox::reparameterize`]
    /// back to the coordinates of `self`: `β = mid + rad ∘ β'`.
    pub fn compose(&self, inner: &FactorBox) -> FactorBox {
        let mid = self.midpoint();
        let rad = self.radius();
        let mut lower = DVector::zeros(self.dim());
        let mut upper = DVector::zeros(self.dim());
        for i in 0..self.dim() {
            let l = (mid[i] + rad[i] * inner.lower[i]).max(self.lower[i]);
            let u = (mid[i] + rad[i] * inner.upper[i]).min(self.upper[i]);
            lower[i] = l.min(u);
            upper[i] = u.max(l);
        }
        FactorBox { lower, upper }
    }

    /// Input zonotope covered by this box: `c' = c + G·mid`, `G' = G·diag(rad)`, with fresh
    /// factors in `[-1, 1]`.
    pub fn reparameterize(&self, root: &Zonotope) -> Result<Zonotope> {
        if root.num_generators() != self.dim() {
            return Err(Error::Dimension(format!(
                "factor box has {} dimensions but zonotope has {} generators",
                self.dim(),
                root.num_generators()
            )));
        }
        let center = root.center() + root.generators() * self.midpoint();
        let mut generators = root.generators().clone();
        for (j, r) in self.radius().iter().enumerate() {
            generators.column_mut(j).scale_mut(*r);
        }
        Ok(Zonotope::from_parts_unchecked(center, generators))
    }
}

/// Linear constraints `C·β ≤ d` on the latent factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl ConstraintSet {
    pub fn new(c: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        if c.nrows() != d.len() {
            return Err(Error::Dimension(format!(
                "constraint matrix has {} rows but offset has length {}",
                c.nrows(),
                d.len()
            )));
        }
        Ok(Self { c, d })
    }

    pub fn empty(q: usize) -> Self {
        Self { c: DMatrix::zeros(0, q), d: DVector::zeros(0) }
    }

    pub fn num_rows(&self) -> usize {
        self.c.nrows()
    }

    pub fn num_factors(&self) -> usize {
        self.c.ncols()
    }

    pub fn is_satisfied(&self, beta: &DVector<f64>, tol: f64) -> bool {
        let lhs = &self.c * beta;
        lhs.iter().zip(self.d.iter()).all(|(l, r)| *l <= r + tol)
    }
}

pub fn pos(v: f64) -> f64 {
    v.max(0.0)
}

pub fn neg(v: f64) -> f64 {
    v.min(0.0)
}

/// `Z(c, G) ⊕ [l, u] = Z(c + (u + l)/2, [G | diag((u − l)/2)])`.
///
/// Zero-width dimensions of the interval do not produce a column. The second return value
/// lists, per appended column, the interval dimension it came from.
pub fn minkowski_sum_interval(z: &Zonotope, iv: &Interval) -> Result<(Zonotope, Vec<usize>)> {
    if z.dim() != iv.dim() {
        return Err(Error::Dimension(format!(
            "minkowski sum of {}-dimensional zonotope and {}-dimensional interval",
            z.dim(),
            iv.dim()
        )));
    }
    let center = z.center() + iv.midpoint();
    let radius = iv.radius();
    let sources: Vec<usize> = (0..iv.dim()).filter(|&i| radius[i] != 0.0).collect();
    let q = z.num_generators();
    let mut generators = z.generators().clone().resize_horizontally(q + sources.len(), 0.0);
    for (col, &i) in sources.iter().enumerate() {
        generators[(i, q + col)] = radius[i];
    }
    Ok((Zonotope::from_parts_unchecked(center, generators), sources))
}

/// `W·Z(c, G) + b = Z(W·c + b, W·G)`.
pub fn affine_map(w: &DMatrix<f64>, z: &Zonotope, b: &DVector<f64>) -> Result<Zonotope> {
    if w.ncols() != z.dim() || w.nrows() != b.len() {
        return Err(Error::Dimension(format!(
            "affine map {}x{} with offset of length {} applied to {}-dimensional zonotope",
            w.nrows(),
            w.ncols(),
            b.len(),
            z.dim()
        )));
    }
    Ok(Zonotope::from_parts_unchecked(w * z.center() + b, w * z.generators()))
}

/// `[c − |G|·1, c + |G|·1]`.
pub fn interval_hull(z: &Zonotope) -> Interval {
    let rad = DVector::from_iterator(
        z.dim(),
        z.generators().row_iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()),
    );
    Interval { lower: z.center() - &rad, upper: z.center() + &rad }
}

/// `max { a·y | y ∈ Z } = a·c + |a·G|·1`.
pub fn support_value(z: &Zonotope, a: &DVector<f64>) -> Result<f64> {
    if a.len() != z.dim() {
        return Err(Error::Dimension(format!(
            "direction of length {} for {}-dimensional zonotope",
            a.len(),
            z.dim()
        )));
    }
    let ag = a.transpose() * z.generators();
    Ok(a.dot(z.center()) + ag.iter().map(|v| v.abs()).sum::<f64>())
}

/// Frobenius norm of the generator matrix.
pub fn frobenius_radius(z: &Zonotope) -> f64 {
    z.generators().norm()
}

/// Interval enclosure of `{ c + G·β }` where the first `box.dim()` factors lie in `bx` and
/// the remaining factors range over `[-1, 1]`.
pub fn conzono_interval(z: &Zonotope, bx: &FactorBox) -> Result<Interval> {
    let q = z.num_generators();
    if bx.dim() > q {
        return Err(Error::Dimension(format!(
            "factor box of dimension {} for zonotope with {} generators",
            bx.dim(),
            q
        )));
    }
    let full = bx.extended(q - bx.dim());
    let g = z.generators();
    let mut lower = z.center().clone();
    let mut upper = z.center().clone();
    for r in 0..z.dim() {
        for j in 0..q {
            let v = g[(r, j)];
            lower[r] += pos(v) * full.lower[j] + neg(v) * full.upper[j];
            upper[r] += pos(v) * full.upper[j] + neg(v) * full.lower[j];
        }
    }
    Ok(Interval { lower, upper })
}

/// Coefficients smaller than this are ignored when isolating a factor; skipping a row is
/// always sound and avoids dividing by noise.
const PIVOT_TOL: f64 = 1e-12;

/// Interval enclosure of `{ β ∈ box0 | C·β ≤ d }` by repeated single-variable isolation.
///
/// Each sweep bounds every dimension `j` by every row `i` with `C_ij ≠ 0`, using the box at
/// the start of the sweep for the other dimensions; sweeps repeat up to `max_iters` times or
/// until nothing changes. Returns `None` when a lower bound exceeds an upper bound, which
/// certifies that the constrained box is empty.
pub fn tighten_factor_bounds(
    cons: &ConstraintSet,
    box0: &FactorBox,
    max_iters: usize,
) -> Result<Option<FactorBox>> {
    if cons.num_factors() != box0.dim() {
        return Err(Error::Dimension(format!(
            "constraints over {} factors applied to box of dimension {}",
            cons.num_factors(),
            box0.dim()
        )));
    }
    let q = box0.dim();
    let mut lower = box0.lower.clone();
    let mut upper = box0.upper.clone();
    for _ in 0..max_iters.max(1) {
        let (l0, u0) = (lower.clone(), upper.clone());
        for i in 0..cons.num_rows() {
            let row = cons.c.row(i);
            // Minimum of the full row over the sweep-start box; per dimension the own term
            // is subtracted back out.
            let row_min: f64 = (0..q).map(|k| pos(row[k]) * l0[k] + neg(row[k]) * u0[k]).sum();
            for j in 0..q {
                let cij = row[j];
                if cij.abs() <= PIVOT_TOL {
                    continue;
                }
                let own = pos(cij) * l0[j] + neg(cij) * u0[j];
                let rest_min = row_min - own;
                let bound = (cons.d[i] - rest_min) / cij;
                if cij > 0.0 {
                    upper[j] = upper[j].min(bound);
                } else {
                    lower[j] = lower[j].max(bound);
                }
            }
        }
        for j in 0..q {
            if lower[j] > upper[j] {
                if lower[j] - upper[j] > EMPTY_TOL {
                    return Ok(None);
                }
                let m = 0.5 * (lower[j] + upper[j]);
                lower[j] = m;
                upper[j] = m;
            }
        }
        if lower == l0 && upper == u0 {
            break;
        }
    }
    Ok(Some(FactorBox { lower, upper }))
}
