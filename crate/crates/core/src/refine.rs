//! Specification-driven input refinement.
//!
//! The output enclosure shares its first `q₀` factors with the input set, so an unsafe
//! output polytope `A·y ≤ b` becomes linear constraints on those factors. Bounding the
//! constrained factor box and re-propagating the smaller input set repeats until the box
//! stops shrinking, becomes empty, or the branch is verified.

use nalgebra::DMatrix;

use crate::enclosure::{propagate, EncloseTrace};
use crate::engine::check_verified;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::setlib::{interval_hull, tighten_factor_bounds, ConstraintSet, FactorBox, HPolytope, Interval, Zonotope};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub refine_iters: usize,
    pub bound_iters: usize,
    /// Stop once an iteration shrinks the box radius (sum of half-widths) by less than this
    /// fraction.
    pub min_shrink: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { refine_iters: 8, bound_iters: 4, min_shrink: 0.01 }
    }
}

/// `C = A·G_y[:, ..q₀]`, `d = b − A·c_y + |A·G_y[:, q₀..]|·1`.
///
/// Every input of the traced input set whose output lies in `unsafe_set` has a factor vector
/// `β` with `C·β ≤ d`.
pub fn unsafe_input_constraints(trace: &EncloseTrace, unsafe_set: &HPolytope, q0: usize) -> Result<ConstraintSet> {
    let y = &trace.output.zono;
    if y.num_generators() < q0 {
        return Err(Error::Dimension(format!(
            "output enclosure has {} generators but {q0} input factors were requested",
            y.num_generators()
        )));
    }
    if unsafe_set.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "unsafe set over {} outputs for {}-dimensional enclosure",
            unsafe_set.dim(),
            y.dim()
        )));
    }
    let ag: DMatrix<f64> = &unsafe_set.a * y.generators();
    let c = ag.columns(0, q0).into_owned();
    let rest = ag.columns(q0, ag.ncols() - q0);
    let slack = rest.abs().column_sum();
    let d = &unsafe_set.b - &unsafe_set.a * y.center() + slack;
    ConstraintSet::new(c, d)
}

/// One propagation/refinement round of [`refine_box_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct RefineStep {
    /// `None` once the remaining unsafe inputs are proven empty.
    pub factor_box: Option<FactorBox>,
    /// Output interval hull of the propagated box (absent for an empty step).
    pub output_hull: Option<Interval>,
}

fn refine_round(
    net: &Network,
    root: &Zonotope,
    unsafe_set: &HPolytope,
    current: &FactorBox,
    bound_iters: usize,
) -> Result<(Interval, Option<FactorBox>)> {
    let input = current.reparameterize(root)?;
    let trace = propagate(net, &input)?;
    let hull = interval_hull(&trace.output.zono);
    if check_verified(&trace.output.zono, unsafe_set)? {
        return Ok((hull, None));
    }
    let q0 = current.dim();
    let cons = unsafe_input_constraints(&trace, unsafe_set, q0)?;
    let local = tighten_factor_bounds(&cons, &FactorBox::unit(q0), bound_iters)?;
    Ok((hull, local.map(|l| current.compose(&l))))
}

fn shrink_ratio(before: &FactorBox, after: &FactorBox) -> f64 {
    let r = before.radius_sum();
    if r <= 0.0 {
        0.0
    } else {
        (r - after.radius_sum()) / r
    }
}

/// Shrink `bx` (in factors of `root`) to a box that still holds every factor vector whose
/// input reaches `unsafe_set`. `None` means no such input exists.
pub fn refine_box(
    net: &Network,
    root: &Zonotope,
    unsafe_set: &HPolytope,
    bx: &FactorBox,
    cfg: &RefineConfig,
) -> Result<Option<FactorBox>> {
    let mut current = bx.clone();
    for _ in 0..cfg.refine_iters {
        let (_, next) = refine_round(net, root, unsafe_set, &current, cfg.bound_iters)?;
        let Some(next) = next else {
            return Ok(None);
        };
        let shrink = shrink_ratio(&current, &next);
        current = next;
        if shrink < cfg.min_shrink {
            break;
        }
    }
    Ok(Some(current))
}

/// Same iteration as [`refine_box`], recording the box and output hull of every round.
/// Step 0 is the unrefined box.
pub fn refine_box_traced(
    net: &Network,
    root: &Zonotope,
    unsafe_set: &HPolytope,
    bx: &FactorBox,
    cfg: &RefineConfig,
) -> Result<Vec<RefineStep>> {
    let mut steps = Vec::new();
    let mut current = bx.clone();
    for _ in 0..cfg.refine_iters {
        let (hull, next) = refine_round(net, root, unsafe_set, &current, cfg.bound_iters)?;
        steps.push(RefineStep { factor_box: Some(current.clone()), output_hull: Some(hull) });
        let Some(next) = next else {
            steps.push(RefineStep { factor_box: None, output_hull: None });
            return Ok(steps);
        };
        let shrink = shrink_ratio(&current, &next);
        current = next;
        if shrink < cfg.min_shrink {
            break;
        }
    }
    let trace = propagate(net, &current.reparameterize(root)?)?;
    steps.push(RefineStep { factor_box: Some(current), output_hull: Some(interval_hull(&trace.output.zono)) });
    Ok(steps)
}
