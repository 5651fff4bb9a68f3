//! Batched branch-and-bound verification.
//!
//! The queue holds factor boxes over the input set (one unsafe polytope per branch). Each
//! iteration dequeues a batch, encloses the outputs, and per branch either proves it safe,
//! returns a forward-checked counterexample, or splits it in two and refines the children.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::enclosure::{propagate, EncloseTrace, Provenance};
use crate::error::{Error, Result};
use crate::network::{Activation, Network};
use crate::refine::{refine_box, RefineConfig};
use crate::setlib::{frobenius_radius, tighten_factor_bounds, ConstraintSet, FactorBox, HPolytope, Zonotope};
use crate::specparse::VerificationTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heuristic {
    /// Gradient of the output F-radius with respect to each source radius.
    EnclosureGradient,
    /// Largest input radius; input splits only.
    LocalRadius,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub refine_on: bool,
    pub refine_iters: usize,
    pub bound_iters: usize,
    pub min_shrink: f64,
    pub batch_size: usize,
    pub heuristic: Heuristic,
    pub max_iterations: usize,
    pub max_subproblems: usize,
    pub max_depth: usize,
    pub timeout_seconds: f64,
    pub falsify_tolerance: f64,
    /// Seed for the sampling checks run alongside verification; the search itself is
    /// deterministic.
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            refine_on: true,
            refine_iters: 8,
            bound_iters: 4,
            min_shrink: 0.01,
            batch_size: 128,
            heuristic: Heuristic::EnclosureGradient,
            max_iterations: usize::MAX,
            max_subproblems: usize::MAX,
            max_depth: 1000,
            timeout_seconds: 116.0,
            falsify_tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl EngineConfig {
    fn refine_config(&self) -> RefineConfig {
        RefineConfig { refine_iters: self.refine_iters, bound_iters: self.bound_iters, min_shrink: self.min_shrink }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.bound_iters == 0 {
            return Err(Error::Invalid("batch size and bound iterations must be positive".into()));
        }
        if self.falsify_tolerance.is_nan() || self.falsify_tolerance < 0.0 || self.timeout_seconds.is_nan() {
            return Err(Error::Invalid("tolerance and timeout must be non-negative numbers".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchItem {
    pub factor_box: FactorBox,
    pub unsafe_index: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownReason {
    Timeout,
    Budget,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Verified,
    Falsified { input: DVector<f64>, output: DVector<f64>, unsafe_index: usize },
    Unknown(UnknownReason),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Stats {
    pub iterations: usize,
    pub subproblems: usize,
    pub peak_queue: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub outcome: Outcome,
    pub stats: Stats,
}

impl Verdict {
    /// VNN-COMP result word.
    pub fn result_word(&self) -> &'static str {
        match self.outcome {
            Outcome::Verified => "unsat",
            Outcome::Falsified { .. } => "sat",
            Outcome::Unknown(_) => "unknown",
        }
    }
}

/// True when some row `i` has `A_i·c − |A_i·G|·1 > b_i`, which proves `Y ∩ U = ∅`.
pub fn check_verified(y: &Zonotope, unsafe_set: &HPolytope) -> Result<bool> {
    if unsafe_set.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "unsafe set over {} outputs for {}-dimensional enclosure",
            unsafe_set.dim(),
            y.dim()
        )));
    }
    let ac = &unsafe_set.a * y.center();
    let ag = &unsafe_set.a * y.generators();
    Ok((0..unsafe_set.num_rows()).any(|i| {
        let spread: f64 = ag.row(i).iter().map(|v| v.abs()).sum();
        ac[i] - spread > unsafe_set.b[i]
    }))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Candidate counterexamples: per unsafe row the input for the output-enclosure point
/// minimizing `A_i·y` (factors `−sign(A_i·G_y)`), then the input center.
pub fn falsify_candidates(trace: &EncloseTrace, input: &Zonotope, unsafe_set: &HPolytope) -> Vec<DVector<f64>> {
    let q0 = input.num_generators();
    let ag = &unsafe_set.a * trace.output.zono.generators();
    let mut out = Vec::with_capacity(unsafe_set.num_rows() + 1);
    for i in 0..unsafe_set.num_rows() {
        let beta = DVector::from_fn(q0, |j, _| -sign(ag[(i, j)]));
        out.push(input.eval(&beta));
    }
    out.push(input.center().clone());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitChoice {
    InputDim(usize),
    Neuron { layer: usize, neuron: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitScores {
    pub input: Vec<f64>,
    /// Every ReLU neuron of the trace in layer order; stable neurons score 0.
    pub neurons: Vec<((usize, usize), f64)>,
}

impl SplitScores {
    /// Highest score, inputs before neurons, lowest index on ties. `None` if nothing scores
    /// above zero.
    pub fn best(&self) -> Option<(SplitChoice, f64)> {
        let mut best: Option<(SplitChoice, f64)> = None;
        let candidates = self
            .input
            .iter()
            .enumerate()
            .map(|(i, s)| (SplitChoice::InputDim(i), *s))
            .chain(self.neurons.iter().map(|((layer, neuron), s)| {
                (SplitChoice::Neuron { layer: *layer, neuron: *neuron }, *s)
            }));
        for (choice, score) in candidates {
            if score > 0.0 && best.is_none_or(|(_, b)| score > b) {
                best = Some((choice, score));
            }
        }
        best
    }

    pub fn best_input(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in self.input.iter().enumerate() {
            if *s > 0.0 && best.is_none_or(|(_, b)| *s > b) {
                best = Some((i, *s));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Enclosure-gradient scores. With slopes and errors held fixed, output column `j` scales
/// linearly with its source radius, so `r·∂‖Y‖_F/∂r = ‖G_y[:, j]‖² / ‖Y‖_F`.
pub fn score_splits(trace: &EncloseTrace) -> SplitScores {
    let y = &trace.output;
    let g = y.zono.generators();
    let f = frobenius_radius(&y.zono);
    let score_col = |col: Option<usize>| -> f64 {
        match col {
            Some(c) if f > 0.0 => g.column(c).norm_squared() / f,
            _ => 0.0,
        }
    };
    let q0 = trace.num_input_factors();
    let input = (0..q0).map(|i| score_col(y.column_of(Provenance::InputFactor(i)))).collect();
    let mut neurons = Vec::new();
    for rec in trace.activations.iter().filter(|a| a.func == Activation::Relu) {
        for n in 0..rec.slopes.len() {
            let col = y.column_of(Provenance::NeuronError { layer: rec.layer, neuron: n });
            neurons.push(((rec.layer, n), score_col(col)));
        }
    }
    SplitScores { input, neurons }
}

/// Input radius scores `|G_x|·1` for the baseline heuristic.
fn radius_scores(trace: &EncloseTrace) -> SplitScores {
    let gx = trace.input.zono.generators();
    let input = (0..gx.ncols()).map(|j| gx.column(j).abs().sum()).collect();
    SplitScores { input, neurons: Vec::new() }
}

/// Children of `parent` for a split choice. ReLU splits cut the neuron's pre-activation at
/// zero; a child proven empty is omitted.
pub fn split(trace: &EncloseTrace, parent: &FactorBox, choice: SplitChoice, bound_iters: usize) -> Result<Vec<FactorBox>> {
    match choice {
        SplitChoice::InputDim(i) => {
            if i >= parent.dim() {
                return Err(Error::Invalid(format!("split dimension {i} out of range")));
            }
            let (l, u) = (parent.lower()[i], parent.upper()[i]);
            let mid = 0.5 * (l + u);
            Ok([parent.with_dim(i, l, mid), parent.with_dim(i, mid, u)].into_iter().flatten().collect())
        }
        SplitChoice::Neuron { layer, neuron } => {
            let rec = trace
                .activation(layer)
                .ok_or_else(|| Error::Invalid(format!("no activation layer {layer} in trace")))?;
            let pre = &rec.pre.zono;
            if neuron >= pre.dim() {
                return Err(Error::Invalid(format!("neuron {neuron} out of range in layer {layer}")));
            }
            let q = pre.num_generators();
            let q0 = parent.dim();
            let g = DMatrix::from_fn(1, q, |_, j| pre.generators()[(neuron, j)]);
            let c = pre.center()[neuron];
            let mut children = Vec::with_capacity(2);
            for side in [1.0, -1.0] {
                // side·(c + g·β) ≤ 0
                let cons = ConstraintSet::new(g.clone() * side, DVector::from_element(1, -side * c))?;
                if let Some(local) = tighten_factor_bounds(&cons, &FactorBox::unit(q), bound_iters)? {
                    children.push(parent.compose(&local.prefix(q0)));
                }
            }
            Ok(children)
        }
    }
}

enum ItemOutcome {
    Verified,
    Falsified { input: DVector<f64>, output: DVector<f64> },
    Children(Vec<BranchItem>),
    Abandoned,
}

struct Problem<'a> {
    net: &'a Network,
    task: &'a VerificationTask,
    root: Zonotope,
    cfg: &'a EngineConfig,
}

impl Problem<'_> {
    fn process(&self, item: &BranchItem) -> Result<ItemOutcome> {
        let unsafe_set = &self.task.unsafe_sets[item.unsafe_index];
        let input = item.factor_box.reparameterize(&self.root)?;
        let trace = propagate(self.net, &input)?;
        if check_verified(&trace.output.zono, unsafe_set)? {
            return Ok(ItemOutcome::Verified);
        }
        for cand in falsify_candidates(&trace, &input, unsafe_set) {
            let x = self.task.input_box.clamp(&cand);
            let y = self.net.forward(&x)?;
            if unsafe_set.contains(&y, self.cfg.falsify_tolerance) {
                return Ok(ItemOutcome::Falsified { input: x, output: y });
            }
        }
        if item.depth >= self.cfg.max_depth {
            return Ok(ItemOutcome::Abandoned);
        }
        match self.children(&trace, item)? {
            Some(children) => Ok(ItemOutcome::Children(children)),
            None => Ok(ItemOutcome::Abandoned),
        }
    }

    /// `None` when there is nothing left to split.
    fn children(&self, trace: &EncloseTrace, item: &BranchItem) -> Result<Option<Vec<BranchItem>>> {
        let unsafe_set = &self.task.unsafe_sets[item.unsafe_index];
        let children = self.split_children(trace, &item.factor_box)?;
        if children.is_empty() {
            return Ok(None);
        }
        let mut out = Vec::with_capacity(children.len());
        for child in children {
            let refined = if self.cfg.refine_on {
                refine_box(self.net, &self.root, unsafe_set, &child, &self.cfg.refine_config())?
            } else {
                Some(child)
            };
            if let Some(bx) = refined {
                out.push(BranchItem { factor_box: bx, unsafe_index: item.unsafe_index, depth: item.depth + 1 });
            }
        }
        Ok(Some(out))
    }

    fn split_children(&self, trace: &EncloseTrace, parent: &FactorBox) -> Result<Vec<FactorBox>> {
        let scores = match self.cfg.heuristic {
            Heuristic::EnclosureGradient => score_splits(trace),
            Heuristic::LocalRadius => radius_scores(trace),
        };
        let fallback_input = || {
            scores.best_input().or_else(|| {
                // Nothing in the enclosure depends on the inputs; split the widest factor.
                let r = parent.radius();
                (r.max() > 0.0).then(|| r.argmax().0)
            })
        };
        let choice = match scores.best() {
            Some((c, _)) => c,
            None => match fallback_input() {
                Some(i) => SplitChoice::InputDim(i),
                None => return Ok(Vec::new()),
            },
        };
        let children = split(trace, parent, choice, self.cfg.bound_iters)?;
        let stagnant = matches!(choice, SplitChoice::Neuron { .. })
            && (children.is_empty() || children.iter().any(|c| c.approx_eq(parent, 1e-12)));
        if !stagnant {
            return Ok(children);
        }
        match fallback_input() {
            Some(i) => split(trace, parent, SplitChoice::InputDim(i), self.cfg.bound_iters),
            None => Ok(Vec::new()),
        }
    }
}

/// Split one branch the way [`verify`] does and refine the children against its unsafe set.
/// Children proven empty are left out; `None` means nothing was left to split.
pub fn expand(
    net: &Network,
    task: &VerificationTask,
    item: &BranchItem,
    cfg: &EngineConfig,
) -> Result<Option<Vec<BranchItem>>> {
    cfg.validate()?;
    let problem = Problem { net, task, root: Zonotope::from_interval(&task.input_box), cfg };
    let unsafe_count = task.unsafe_sets.len();
    if item.unsafe_index >= unsafe_count {
        return Err(Error::Invalid(format!("unsafe index {} but the task has {unsafe_count} sets", item.unsafe_index)));
    }
    let input = item.factor_box.reparameterize(&problem.root)?;
    let trace = propagate(net, &input)?;
    problem.children(&trace, item)
}

/// Run branch-and-bound on `task`.
pub fn verify(net: &Network, task: &VerificationTask, cfg: &EngineConfig) -> Result<Verdict> {
    cfg.validate()?;
    if task.input_dim() != net.input_dim() || task.output_dim() != net.output_dim() {
        return Err(Error::Dimension(format!(
            "task is {} -> {} but network is {} -> {}",
            task.input_dim(),
            task.output_dim(),
            net.input_dim(),
            net.output_dim()
        )));
    }
    let start = Instant::now();
    let timeout = Duration::try_from_secs_f64(cfg.timeout_seconds.max(0.0)).unwrap_or(Duration::MAX);
    let problem = Problem { net, task, root: Zonotope::from_interval(&task.input_box), cfg };
    let q0 = problem.root.num_generators();

    let mut queue: VecDeque<BranchItem> = (0..task.unsafe_sets.len())
        .map(|p| BranchItem { factor_box: FactorBox::unit(q0), unsafe_index: p, depth: 0 })
        .collect();
    let mut stats = Stats { peak_queue: queue.len(), ..Default::default() };
    let mut incomplete = false;

    let finish = |outcome: Outcome, mut stats: Stats| {
        stats.wall_time_s = start.elapsed().as_secs_f64();
        Ok(Verdict { outcome, stats })
    };

    while !queue.is_empty() {
        if stats.iterations >= cfg.max_iterations || stats.subproblems >= cfg.max_subproblems {
            return finish(Outcome::Unknown(UnknownReason::Budget), stats);
        }
        if start.elapsed() >= timeout {
            return finish(Outcome::Unknown(UnknownReason::Timeout), stats);
        }
        let take = cfg.batch_size.min(queue.len()).min(cfg.max_subproblems - stats.subproblems);
        let batch: Vec<BranchItem> = queue.drain(..take).collect();
        let outcomes: Vec<ItemOutcome> = batch.par_iter().map(|item| problem.process(item)).collect::<Result<_>>()?;
        stats.iterations += 1;
        for (item, outcome) in batch.iter().zip(outcomes) {
            stats.subproblems += 1;
            match outcome {
                ItemOutcome::Verified => {}
                ItemOutcome::Falsified { input, output } => {
                    return finish(Outcome::Falsified { input, output, unsafe_index: item.unsafe_index }, stats);
                }
                ItemOutcome::Children(children) => queue.extend(children),
                ItemOutcome::Abandoned => incomplete = true,
            }
        }
        stats.peak_queue = stats.peak_queue.max(queue.len());
    }
    if incomplete {
        finish(Outcome::Unknown(UnknownReason::Budget), stats)
    } else {
        finish(Outcome::Verified, stats)
    }
}
