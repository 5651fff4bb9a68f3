//! Brute-force ground truth for small instances: exact bounds of a constrained box by vertex
//! enumeration, exhaustive activation-pattern reachability for small ReLU networks, and
//! sampling-based falsification.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::setlib::{ConstraintSet, FactorBox, HPolytope, Interval};

/// Feasibility slack for vertex checks.
pub const VERTEX_TOL: f64 = 1e-9;

const MAX_BOX_DIM: usize = 8;
const MAX_BOX_ROWS: usize = 24;
const MAX_RELUS: usize = 12;

/// Half-space rows `a·x ≤ b`.
#[derive(Debug, Clone)]
struct Rows {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Rows {
    fn with_box(lower: &DVector<f64>, upper: &DVector<f64>) -> Self {
        let n = lower.len();
        let mut rows = Rows { a: Vec::new(), b: Vec::new() };
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            rows.push(e.clone(), upper[j]);
            e[j] = -1.0;
            rows.push(e, -lower[j]);
        }
        rows
    }

    fn push(&mut self, a: Vec<f64>, b: f64) {
        self.a.push(a);
        self.b.push(b);
    }

    fn len(&self) -> usize {
        self.b.len()
    }

    fn feasible(&self, x: &DVector<f64>) -> bool {
        self.a
            .iter()
            .zip(&self.b)
            .all(|(a, b)| a.iter().zip(x.iter()).map(|(p, q)| p * q).sum::<f64>() <= b + VERTEX_TOL)
    }
}

/// Calls `visit` with each feasible vertex until it returns `true`.
fn for_each_vertex(rows: &Rows, n: usize, mut visit: impl FnMut(DVector<f64>) -> bool) {
    let m = rows.len();
    if n == 0 {
        let x = DVector::zeros(0);
        if rows.feasible(&x) {
            visit(x);
        }
        return;
    }
    if m < n {
        return;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let mat = DMatrix::from_fn(n, n, |r, c| rows.a[idx[r]][c]);
        let rhs = DVector::from_fn(n, |r, _| rows.b[idx[r]]);
        if let Some(x) = mat.lu().solve(&rhs) {
            if x.iter().all(|v| v.is_finite()) && rows.feasible(&x) && visit(x) {
                return;
            }
        }
        // next combination
        let mut k = n;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            if idx[k] < m - n + k {
                idx[k] += 1;
                for t in k + 1..n {
                    idx[t] = idx[t - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Exact per-dimension bounds of `{ β ∈ bx | C·β ≤ d }`; `None` when empty.
pub fn exact_box_bounds(cons: &ConstraintSet, bx: &FactorBox) -> Result<Option<FactorBox>> {
    let q = bx.dim();
    if cons.num_factors() != q {
        return Err(Error::Dimension("constraint width differs from box dimension".into()));
    }
    if q > MAX_BOX_DIM || cons.num_rows() + 2 * q > MAX_BOX_ROWS {
        return Err(Error::Invalid(format!(
            "exact bounds limited to {MAX_BOX_DIM} factors and {MAX_BOX_ROWS} constraints"
        )));
    }
    let mut rows = Rows::with_box(bx.lower(), bx.upper());
    for i in 0..cons.num_rows() {
        rows.push(cons.c.row(i).iter().copied().collect(), cons.d[i]);
    }
    let mut lower = DVector::from_element(q, f64::INFINITY);
    let mut upper = DVector::from_element(q, f64::NEG_INFINITY);
    let mut found = false;
    for_each_vertex(&rows, q, |v| {
        found = true;
        for j in 0..q {
            lower[j] = lower[j].min(v[j]);
            upper[j] = upper[j].max(v[j]);
        }
        false
    });
    if !found {
        if rows.feasible(&bx.midpoint()) {
            return Err(Error::Invalid("vertex enumeration missed a feasible region".into()));
        }
        return Ok(None);
    }
    let lower = DVector::from_fn(q, |j, _| lower[j].clamp(bx.lower()[j], bx.upper()[j]));
    let upper = DVector::from_fn(q, |j, _| upper[j].clamp(lower[j], bx.upper()[j]));
    FactorBox::new(lower, upper).map(Some)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reachability {
    Safe,
    UnsafeWitness(DVector<f64>),
}

/// Affine map `x ↦ M·x + m` of every ReLU pre-activation and of the output for one pattern,
/// plus the pattern's sign constraints.
fn pattern_rows(layers: &[Layer], n0: usize, pattern: u64, unsafe_set: &HPolytope, base: &Rows) -> Option<Rows> {
    let mut rows = base.clone();
    let mut m_mat = DMatrix::<f64>::identity(n0, n0);
    let mut m_off = DVector::<f64>::zeros(n0);
    let mut bit = 0;
    for layer in layers {
        match layer {
            Layer::Linear { weights, bias } => {
                m_mat = weights * &m_mat;
                m_off = weights * &m_off + bias;
            }
            Layer::Activation { width, .. } => {
                for i in 0..*width {
                    let active = pattern >> bit & 1 == 1;
                    bit += 1;
                    let sign = if active { -1.0 } else { 1.0 };
                    // sign·(M_i·x + m_i) ≤ 0
                    let a: Vec<f64> = m_mat.row(i).iter().map(|v| sign * v).collect();
                    let b = -sign * m_off[i];
                    if a.iter().all(|v| *v == 0.0) {
                        if b < -VERTEX_TOL {
                            return None;
                        }
                    } else {
                        rows.push(a, b);
                    }
                    if !active {
                        m_mat.row_mut(i).fill(0.0);
                        m_off[i] = 0.0;
                    }
                }
            }
        }
    }
    let am = &unsafe_set.a * &m_mat;
    let rhs = &unsafe_set.b - &unsafe_set.a * &m_off;
    for r in 0..am.nrows() {
        let a: Vec<f64> = am.row(r).iter().copied().collect();
        if a.iter().all(|v| *v == 0.0) {
            if rhs[r] < -VERTEX_TOL {
                return None;
            }
        } else {
            rows.push(a, rhs[r]);
        }
    }
    Some(rows)
}

/// Box lower bound of each row exceeds its offset: cheap infeasibility certificate.
fn box_infeasible(rows: &Rows, input_box: &Interval) -> bool {
    rows.a.iter().zip(&rows.b).any(|(a, b)| {
        let min: f64 = a
            .iter()
            .enumerate()
            .map(|(j, v)| if *v > 0.0 { v * input_box.lower[j] } else { v * input_box.upper[j] })
            .sum();
        min > b + VERTEX_TOL
    })
}

/// Decide whether any input of `input_box` reaches `unsafe_set` by enumerating all ReLU
/// activation patterns (at most 12 neurons).
pub fn exhaustive_reach_tiny(net: &Network, input_box: &Interval, unsafe_set: &HPolytope) -> Result<Reachability> {
    let net = net.folded();
    if !net.is_relu_only() {
        return Err(Error::Invalid("exhaustive reachability supports ReLU networks only".into()));
    }
    let relus = net.relu_count();
    if relus > MAX_RELUS {
        return Err(Error::Invalid(format!("{relus} ReLU neurons exceed the limit of {MAX_RELUS}")));
    }
    if input_box.dim() != net.input_dim() || unsafe_set.dim() != net.output_dim() {
        return Err(Error::Dimension("box or unsafe set does not match the network".into()));
    }
    let n0 = net.input_dim();
    let base = Rows::with_box(&input_box.lower, &input_box.upper);
    let witness = (0..1u64 << relus).into_par_iter().find_map_first(|pattern| {
        let rows = pattern_rows(net.layers(), n0, pattern, unsafe_set, &base)?;
        if box_infeasible(&rows, input_box) {
            return None;
        }
        let mut hit = None;
        for_each_vertex(&rows, n0, |v| {
            hit = Some(input_box.clamp(&v));
            true
        });
        hit
    });
    Ok(match witness {
        Some(x) => Reachability::UnsafeWitness(x),
        None => Reachability::Safe,
    })
}

fn corners(input_box: &Interval) -> impl Iterator<Item = DVector<f64>> + '_ {
    let n = input_box.dim();
    let count = if n <= 16 { 1u64 << n } else { 0 };
    (0..count).map(move |mask| {
        DVector::from_fn(n, |j, _| if mask >> j & 1 == 1 { input_box.upper[j] } else { input_box.lower[j] })
    })
}

/// Box corners, the center, then seeded uniform samples; returns the first input whose
/// output lies in `unsafe_set`.
pub fn grid_falsify(
    net: &Network,
    input_box: &Interval,
    unsafe_set: &HPolytope,
    samples: usize,
    seed: u64,
) -> Result<Option<DVector<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = input_box.dim();
    let random = std::iter::repeat_with(move || {
        DVector::from_fn(n, |j, _| {
            let (l, u) = (input_box.lower[j], input_box.upper[j]);
            l + (u - l) * rng.random::<f64>()
        })
    });
    for x in corners(input_box).chain(std::iter::once(input_box.midpoint())).chain(random).take(samples) {
        if unsafe_set.contains(&net.forward(&x)?, 0.0) {
            return Ok(Some(x));
        }
    }
    Ok(None)
}
