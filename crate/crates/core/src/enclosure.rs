//! Sound zonotope propagation through a network.
//!
//! Linear layers are exact affine maps. An activation layer is replaced by a per-neuron
//! linear function `λ·x` plus an error interval; the error interval enters as new generator
//! columns (one per neuron with nonzero error), so every propagated set keeps the input
//! factors as its first columns.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{Activation, Layer, Network};
use crate::setlib::{affine_map, interval_hull, minkowski_sum_interval, Interval, Zonotope};

/// Pre-activation bounds within this (relative) distance of zero count as stable.
const STABLE_TOL: f64 = 1e-12;

/// Margin added to smooth-activation error intervals.
const SMOOTH_WIDEN: f64 = 1e-9;

/// Where a generator column came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    InputFactor(usize),
    /// Approximation error of `neuron` in the activation layer at index `layer` of the network.
    NeuronError { layer: usize, neuron: usize },
}

/// A zonotope together with the source of each generator column.
#[derive(Debug, Clone, PartialEq)]
pub struct TracedZonotope {
    pub zono: Zonotope,
    pub provenance: Vec<Provenance>,
}

impl TracedZonotope {
    pub fn from_input(zono: Zonotope) -> Self {
        let provenance = (0..zono.num_generators()).map(Provenance::InputFactor).collect();
        Self { zono, provenance }
    }

    /// Column index of a source, if it has a column.
    pub fn column_of(&self, source: Provenance) -> Option<usize> {
        match source {
            Provenance::InputFactor(i) if i < self.provenance.len() && self.provenance[i] == source => Some(i),
            _ => self.provenance.iter().position(|p| *p == source),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    /// Index of the activation layer in the network.
    pub layer: usize,
    pub func: Activation,
    pub pre: TracedZonotope,
    pub bounds: Interval,
    pub slopes: DVector<f64>,
    pub error: Interval,
}

impl ActivationRecord {
    /// `(d̄ − d̲) / 2` per neuron.
    pub fn error_radius(&self) -> DVector<f64> {
        self.error.radius()
    }

    pub fn is_unstable(&self, neuron: usize) -> bool {
        self.error.upper[neuron] > self.error.lower[neuron]
    }
}

/// Everything the refinement and splitting steps need from one propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncloseTrace {
    pub input: TracedZonotope,
    pub activations: Vec<ActivationRecord>,
    pub output: TracedZonotope,
}

impl EncloseTrace {
    pub fn num_input_factors(&self) -> usize {
        self.input.zono.num_generators()
    }

    pub fn activation(&self, layer: usize) -> Option<&ActivationRecord> {
        self.activations.iter().find(|a| a.layer == layer)
    }
}

/// Result of enclosing one activation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Enclosed {
    pub output: Zonotope,
    pub slopes: DVector<f64>,
    pub error: Interval,
    /// Neuron index per appended error column.
    pub error_sources: Vec<usize>,
}

/// Slope and error interval of the ReLU relaxation on `[l, u]`.
pub fn relu_relaxation(l: f64, u: f64) -> (f64, f64, f64) {
    let tol = STABLE_TOL * 1f64.max(l.abs()).max(u.abs());
    if u <= tol {
        (0.0, 0.0, 0.0)
    } else if l >= -tol {
        (1.0, 0.0, 0.0)
    } else {
        let slope = u / (u - l);
        (slope, 0.0, -slope * l)
    }
}

fn sigmoid(x: f64) -> f64 {
    Activation::Sigmoid.apply(x)
}

fn derivative(func: Activation, x: f64) -> f64 {
    match func {
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s)
        }
        Activation::Tanh => 1.0 - x.tanh().powi(2),
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Points where the derivative of `func` equals `slope`.
fn critical_points(func: Activation, slope: f64) -> Vec<f64> {
    match func {
        Activation::Sigmoid => {
            // s(1 − s) = λ
            let disc = (1.0 - 4.0 * slope).max(0.0).sqrt();
            [(1.0 - disc) / 2.0, (1.0 + disc) / 2.0]
                .into_iter()
                .filter(|s| *s > 0.0 && *s < 1.0)
                .map(|s| (s / (1.0 - s)).ln())
                .collect()
        }
        Activation::Tanh => {
            // 1 − t² = λ
            let t = (1.0 - slope).max(0.0).sqrt();
            if t >= 1.0 {
                vec![]
            } else {
                vec![-t.atanh(), t.atanh()]
            }
        }
        Activation::Relu => vec![0.0],
    }
}

/// Secant slope and error interval for sigmoid or tanh on `[l, u]`.
pub fn smooth_relaxation(func: Activation, l: f64, u: f64) -> (f64, f64, f64) {
    debug_assert!(func != Activation::Relu);
    let width = u - l;
    if width <= 0.0 {
        let slope = derivative(func, l);
        let e = func.apply(l) - slope * l;
        return (slope, e, e);
    }
    let slope = if width <= 1e-9 {
        derivative(func, 0.5 * (l + u))
    } else {
        (func.apply(u) - func.apply(l)) / width
    };
    let mut candidates = vec![l, u];
    candidates.extend(critical_points(func, slope).into_iter().filter(|x| *x > l && *x < u));
    let dev = |x: f64| func.apply(x) - slope * x;
    let (lo, hi) = candidates
        .iter()
        .map(|x| dev(*x))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    (slope, lo - SMOOTH_WIDEN, hi + SMOOTH_WIDEN)
}

fn enclose_with(
    h: &Zonotope,
    relax: impl Fn(f64, f64) -> (f64, f64, f64),
) -> Enclosed {
    let bounds = interval_hull(h);
    let n = h.dim();
    let mut slopes = DVector::zeros(n);
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    for i in 0..n {
        let (s, dl, du) = relax(bounds.lower[i], bounds.upper[i]);
        slopes[i] = s;
        lower[i] = dl;
        upper[i] = du;
    }
    let error = Interval { lower, upper };
    let scaled = affine_map(&DMatrix::from_diagonal(&slopes), h, &DVector::zeros(n))
        .expect("diagonal map preserves dimension");
    let (output, error_sources) =
        minkowski_sum_interval(&scaled, &error).expect("error interval matches layer width");
    Enclosed { output, slopes, error, error_sources }
}

/// `diag(λ)·h ⊕ [d̲, d̄]` with the ReLU relaxation per neuron.
pub fn enclose_relu(h: &Zonotope) -> Enclosed {
    enclose_with(h, relu_relaxation)
}

/// Secant-slope enclosure for sigmoid or tanh.
pub fn enclose_smooth(h: &Zonotope, func: Activation) -> Result<Enclosed> {
    if func == Activation::Relu {
        return Err(Error::Invalid("enclose_smooth called with relu".into()));
    }
    Ok(enclose_with(h, |l, u| smooth_relaxation(func, l, u)))
}

fn scale_shift(z: &TracedZonotope, scale: &DVector<f64>, shift: &DVector<f64>) -> TracedZonotope {
    let zono = affine_map(&DMatrix::from_diagonal(scale), &z.zono, shift).expect("dimensions checked");
    TracedZonotope { zono, provenance: z.provenance.clone() }
}

/// Enclose the image of `input` under `net`. The input's generators are the input factors.
pub fn propagate(net: &Network, input: &Zonotope) -> Result<EncloseTrace> {
    if input.dim() != net.input_dim() {
        return Err(Error::Dimension(format!(
            "input set of dimension {} for network with {} inputs",
            input.dim(),
            net.input_dim()
        )));
    }
    let start = TracedZonotope::from_input(input.clone());
    let mut current = match net.normalization() {
        Some(n) => {
            let inv = n.input_range.map(|r| 1.0 / r);
            let shift = -n.input_mean.component_mul(&inv);
            scale_shift(&start, &inv, &shift)
        }
        None => start.clone(),
    };
    let mut activations = Vec::new();
    for (k, layer) in net.layers().iter().enumerate() {
        current = match layer {
            Layer::Linear { weights, bias } => TracedZonotope {
                zono: affine_map(weights, &current.zono, bias)?,
                provenance: current.provenance,
            },
            Layer::Activation { func, .. } => {
                let enclosed = match func {
                    Activation::Relu => enclose_relu(&current.zono),
                    f => enclose_smooth(&current.zono, *f)?,
                };
                let bounds = interval_hull(&current.zono);
                let mut provenance = current.provenance.clone();
                provenance.extend(
                    enclosed.error_sources.iter().map(|&neuron| Provenance::NeuronError { layer: k, neuron }),
                );
                activations.push(ActivationRecord {
                    layer: k,
                    func: *func,
                    pre: current,
                    bounds,
                    slopes: enclosed.slopes,
                    error: enclosed.error,
                });
                TracedZonotope { zono: enclosed.output, provenance }
            }
        };
    }
    if let Some(n) = net.normalization() {
        current = scale_shift(&current, &n.output_range, &n.output_mean);
    }
    Ok(EncloseTrace { input: start, activations, output: current })
}

/// [`propagate`] over a batch of inputs sharing dimension and factor count.
pub fn propagate_batch(net: &Network, inputs: &[Zonotope]) -> Result<Vec<EncloseTrace>> {
    if let Some(first) = inputs.first() {
        if let Some(bad) = inputs
            .iter()
            .position(|z| z.dim() != first.dim() || z.num_generators() != first.num_generators())
        {
            return Err(Error::Dimension(format!(
                "batch entry {bad} differs in shape from entry 0"
            )));
        }
    }
    inputs.par_iter().map(|z| propagate(net, z)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn relu_relaxation_cases() {
        assert_eq!(relu_relaxation(-1.0, 1.0), (0.5, 0.0, 0.5));
        assert_eq!(relu_relaxation(1.0, 3.0), (1.0, 0.0, 0.0));
        assert_eq!(relu_relaxation(-3.0, -1.0), (0.0, 0.0, 0.0));
        let (s, dl, du) = relu_relaxation(-2.0, 1.0);
        assert!((s - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dl, 0.0);
        assert!((du - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn relu_gap_is_tight_at_endpoints() {
        for (l, u) in [(-1.0, 1.0), (-2.0, 1.0), (-0.1, 5.0)] {
            let (s, dl, du) = relu_relaxation(l, u);
            for x in [l, 0.0, u] {
                let gap = x.max(0.0) - s * x;
                assert!(gap >= dl - 1e-15 && gap <= du + 1e-15);
            }
            assert!((l.max(0.0) - s * l - du).abs() < 1e-14);
            assert!((u - s * u - du).abs() < 1e-14);
        }
    }

    #[test]
    fn sigmoid_point_interval() {
        let (s, dl, du) = smooth_relaxation(Activation::Sigmoid, 0.0, 0.0);
        assert_eq!(s, 0.25);
        assert_eq!(dl, du);
    }

    #[test]
    fn tanh_symmetric_error() {
        let (_, dl, du) = smooth_relaxation(Activation::Tanh, -1.5, 1.5);
        assert!((dl + du).abs() < 1e-12);
        assert!(du > 0.0);
    }

    #[test]
    fn sigmoid_error_matches_dense_sampling() {
        for (l, u) in [(-1.0, 1.0), (-4.0, 0.5), (0.3, 6.0), (-7.0, -2.0)] {
            let (s, dl, du) = smooth_relaxation(Activation::Sigmoid, l, u);
            let n = 100_000;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for k in 0..=n {
                let x = l + (u - l) * (k as f64) / (n as f64);
                let d = sigmoid(x) - s * x;
                lo = lo.min(d);
                hi = hi.max(d);
            }
            assert!(dl <= lo && du >= hi, "[{dl},{du}] must contain [{lo},{hi}]");
            assert!(lo - dl < 1e-8 && du - hi < 1e-8, "[{dl},{du}] too loose vs [{lo},{hi}]");
        }
    }

    #[test]
    fn enclose_relu_example_layer() {
        let h1 = Zonotope::new(dvector![1.0, 0.0], dmatrix![1.0, -1.0; 1.0, 1.0] * 0.5).unwrap();
        let out = enclose_relu(&h1);
        assert_eq!(out.slopes, dvector![1.0, 0.5]);
        assert_eq!(out.error.upper, dvector![0.0, 0.5]);
        assert_eq!(out.error_sources, vec![1]);
        assert_eq!(out.output.generators(), &(dmatrix![2.0, -2.0, 0.0; 1.0, 1.0, 1.0] * 0.25));
        assert_eq!(out.output.center(), &dvector![1.0, 0.25]);
    }

    #[test]
    fn provenance_lookup() {
        let t = TracedZonotope {
            zono: Zonotope::new(dvector![0.0], dmatrix![1.0, 2.0, 3.0]).unwrap(),
            provenance: vec![
                Provenance::InputFactor(0),
                Provenance::InputFactor(1),
                Provenance::NeuronError { layer: 1, neuron: 4 },
            ],
        };
        assert_eq!(t.column_of(Provenance::InputFactor(1)), Some(1));
        assert_eq!(t.column_of(Provenance::NeuronError { layer: 1, neuron: 4 }), Some(2));
        assert_eq!(t.column_of(Provenance::NeuronError { layer: 1, neuron: 0 }), None);
    }

    #[test]
    fn batch_rejects_heterogeneous_shapes() {
        let net = Network::new(vec![Layer::Linear { weights: DMatrix::identity(1, 1), bias: dvector![0.0] }]).unwrap();
        let a = Zonotope::new(dvector![0.0], dmatrix![1.0]).unwrap();
        let b = Zonotope::new(dvector![0.0], dmatrix![1.0, 1.0]).unwrap();
        assert!(propagate_batch(&net, &[a, b]).is_err());
    }
}
