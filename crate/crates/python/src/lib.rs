//! Python bindings: networks, zonotopes, propagation, factor-bound tightening, VNN-LIB
//! parsing and verification. Vectors are lists of floats, matrices lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use zonoverify_core::enclosure::propagate as core_propagate;
use zonoverify_core::engine::{score_splits, SplitChoice};
use zonoverify_core::network::{load_network, parse_json_net, parse_nnet, serialize_json_net};
use zonoverify_core::oracle::exact_box_bounds as core_exact_box_bounds;
use zonoverify_core::setlib::{
    affine_map, frobenius_radius, interval_hull, minkowski_sum_interval, support_value,
    tighten_factor_bounds as core_tighten, ConstraintSet, FactorBox, HPolytope, Interval,
    Zonotope as CoreZonotope,
};
use zonoverify_core::specparse::{parse_vnnlib as core_parse_vnnlib, parse_witness as core_parse_witness, write_witness};
use zonoverify_core::{EngineConfig, Heuristic, Network as CoreNetwork, Outcome, VerificationTask};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn from_vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn factor_box(lower: Vec<f64>, upper: Vec<f64>) -> PyResult<FactorBox> {
    FactorBox::new(to_vector(lower), to_vector(upper)).map_err(err)
}

type Bounds = Option<(Vec<f64>, Vec<f64>)>;

fn box_bounds(bx: Option<FactorBox>) -> Bounds {
    bx.map(|b| (from_vector(b.lower()), from_vector(b.upper())))
}

#[pyclass(name = "Network", module = "zonoverify", frozen)]
struct PyNetwork {
    inner: CoreNetwork,
}

#[pymethods]
impl PyNetwork {
    /// Load a `.nnet` or `.json` file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_network(std::path::Path::new(path)).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_nnet(text: &str) -> PyResult<Self> {
        parse_nnet(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        parse_json_net(text).map(|inner| Self { inner }).map_err(err)
    }

    fn to_json(&self) -> String {
        serialize_json_net(&self.inner)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&to_vector(x)).map(|y| from_vector(&y)).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Network({} -> {}, {} layers)", self.inner.input_dim(), self.inner.output_dim(), self.inner.layers().len())
    }
}

#[pyclass(name = "Zonotope", module = "zonoverify", frozen)]
struct PyZonotope {
    inner: CoreZonotope,
}

#[pymethods]
impl PyZonotope {
    #[new]
    fn new(center: Vec<f64>, generators: Vec<Vec<f64>>) -> PyResult<Self> {
        let n = center.len();
        let g = if generators.is_empty() { DMatrix::zeros(n, 0) } else { to_matrix(&generators, "generators")? };
        CoreZonotope::new(to_vector(center), g).map(|inner| Self { inner }).map_err(err)
    }

    /// Axis-aligned box `[lower, upper]` with one generator per dimension.
    #[staticmethod]
    fn from_interval(lower: Vec<f64>, upper: Vec<f64>) -> PyResult<Self> {
        let iv = Interval::new(to_vector(lower), to_vector(upper)).map_err(err)?;
        Ok(Self { inner: CoreZonotope::from_interval(&iv) })
    }

    #[getter]
    fn center(&self) -> Vec<f64> {
        from_vector(self.inner.center())
    }

    #[getter]
    fn generators(&self) -> Vec<Vec<f64>> {
        from_matrix(self.inner.generators())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_generators(&self) -> usize {
        self.inner.num_generators()
    }

    fn affine(&self, weights: Vec<Vec<f64>>, bias: Vec<f64>) -> PyResult<Self> {
        let w = to_matrix(&weights, "weights")?;
        affine_map(&w, &self.inner, &to_vector(bias)).map(|inner| Self { inner }).map_err(err)
    }

    /// Minkowski sum with the box `[lower, upper]`; degenerate rows add no generator.
    fn minkowski_interval(&self, lower: Vec<f64>, upper: Vec<f64>) -> PyResult<Self> {
        let iv = Interval::new(to_vector(lower), to_vector(upper)).map_err(err)?;
        minkowski_sum_interval(&self.inner, &iv).map(|(inner, _)| Self { inner }).map_err(err)
    }

    fn interval_hull(&self) -> (Vec<f64>, Vec<f64>) {
        let iv = interval_hull(&self.inner);
        (from_vector(&iv.lower), from_vector(&iv.upper))
    }

    fn support(&self, direction: Vec<f64>) -> PyResult<f64> {
        support_value(&self.inner, &to_vector(direction)).map_err(err)
    }

    fn frobenius_radius(&self) -> f64 {
        frobenius_radius(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Zonotope(dim={}, generators={})", self.inner.dim(), self.inner.num_generators())
    }
}

#[pyclass(name = "Task", module = "zonoverify", frozen)]
struct PyTask {
    inner: VerificationTask,
}

#[pymethods]
impl PyTask {
    #[new]
    fn new(input_lower: Vec<f64>, input_upper: Vec<f64>, unsafe_sets: Vec<(Vec<Vec<f64>>, Vec<f64>)>) -> PyResult<Self> {
        let iv = Interval::new(to_vector(input_lower), to_vector(input_upper)).map_err(err)?;
        let sets = unsafe_sets
            .into_iter()
            .map(|(a, b)| HPolytope::new(to_matrix(&a, "unsafe set")?, to_vector(b)).map_err(err))
            .collect::<PyResult<Vec<_>>>()?;
        VerificationTask::new(iv, sets).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn input_box(&self) -> (Vec<f64>, Vec<f64>) {
        (from_vector(&self.inner.input_box.lower), from_vector(&self.inner.input_box.upper))
    }

    /// Unsafe polytopes `A·y ≤ b` as `(A, b)` pairs; the property is violated if any holds.
    #[getter]
    fn unsafe_sets(&self) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
        self.inner.unsafe_sets.iter().map(|u| (from_matrix(&u.a), from_vector(&u.b))).collect()
    }
}

#[pyfunction]
fn parse_vnnlib(text: &str, input_dim: usize, output_dim: usize) -> PyResult<PyTask> {
    core_parse_vnnlib(text, input_dim, output_dim).map(|inner| PyTask { inner }).map_err(err)
}

/// Output enclosure of `input` through `net`.
#[pyfunction]
fn propagate(net: &PyNetwork, input: &PyZonotope) -> PyResult<PyZonotope> {
    core_propagate(&net.inner, &input.inner).map(|t| PyZonotope { inner: t.output.zono }).map_err(err)
}

/// Enclosure-gradient split scores as a dict with `input`, `neurons` (`((layer, neuron), score)`
/// pairs) and `best` (`("input", i, 0)`, `("neuron", layer, neuron)` or `None`).
#[pyfunction]
fn split_scores(py: Python<'_>, net: &PyNetwork, input: &PyZonotope) -> PyResult<Py<PyDict>> {
    let trace = core_propagate(&net.inner, &input.inner).map_err(err)?;
    let scores = score_splits(&trace);
    let d = PyDict::new(py);
    d.set_item("input", scores.input.clone())?;
    d.set_item("neurons", scores.neurons.clone())?;
    let best = scores.best().map(|(c, _)| match c {
        SplitChoice::InputDim(i) => ("input".to_string(), i, 0),
        SplitChoice::Neuron { layer, neuron } => ("neuron".to_string(), layer, neuron),
    });
    d.set_item("best", best)?;
    Ok(d.unbind())
}

#[pyfunction]
#[pyo3(signature = (c, d, lower, upper, max_iters=4))]
fn tighten_factor_bounds(c: Vec<Vec<f64>>, d: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>, max_iters: usize) -> PyResult<Bounds> {
    let cons = ConstraintSet::new(to_matrix(&c, "C")?, to_vector(d)).map_err(err)?;
    core_tighten(&cons, &factor_box(lower, upper)?, max_iters).map(box_bounds).map_err(err)
}

#[pyfunction]
fn exact_box_bounds(c: Vec<Vec<f64>>, d: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> PyResult<Bounds> {
    let cons = ConstraintSet::new(to_matrix(&c, "C")?, to_vector(d)).map_err(err)?;
    core_exact_box_bounds(&cons, &factor_box(lower, upper)?).map(box_bounds).map_err(err)
}

/// Run verification and return a dict with `result` (`sat`/`unsat`/`unknown`), run
/// statistics and, for `sat`, the counterexample `input`/`output`.
#[pyfunction]
#[pyo3(signature = (
    net, task, refine=true, refine_iters=8, bound_iters=4, batch_size=128, heuristic="enclosure",
    timeout=116.0, max_subproblems=None, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn verify(
    py: Python<'_>,
    net: &PyNetwork,
    task: &PyTask,
    refine: bool,
    refine_iters: usize,
    bound_iters: usize,
    batch_size: usize,
    heuristic: &str,
    timeout: f64,
    max_subproblems: Option<usize>,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let heuristic = match heuristic {
        "enclosure" => Heuristic::EnclosureGradient,
        "radius" => Heuristic::LocalRadius,
        other => return Err(PyValueError::new_err(format!("unknown heuristic {other:?}"))),
    };
    let cfg = EngineConfig {
        refine_on: refine,
        refine_iters,
        bound_iters,
        batch_size,
        heuristic,
        timeout_seconds: timeout,
        max_subproblems: max_subproblems.unwrap_or(usize::MAX),
        seed,
        ..EngineConfig::default()
    };
    let verdict = py.detach(|| zonoverify_core::verify(&net.inner, &task.inner, &cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("result", verdict.result_word())?;
    d.set_item("iterations", verdict.stats.iterations)?;
    d.set_item("subproblems", verdict.stats.subproblems)?;
    d.set_item("peak_queue", verdict.stats.peak_queue)?;
    d.set_item("wall_time_s", verdict.stats.wall_time_s)?;
    match &verdict.outcome {
        Outcome::Falsified { input, output, unsafe_index } => {
            d.set_item("input", from_vector(input))?;
            d.set_item("output", from_vector(output))?;
            d.set_item("unsafe_index", *unsafe_index)?;
            d.set_item("witness", write_witness(input, output))?;
        }
        Outcome::Unknown(reason) => d.set_item("reason", format!("{reason:?}").to_lowercase())?,
        Outcome::Verified => {}
    }
    Ok(d.unbind())
}

#[pyfunction]
fn parse_witness(text: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
    core_parse_witness(text).map(|(x, y)| (from_vector(&x), from_vector(&y))).map_err(err)
}

#[pymodule]
fn zonoverify(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyZonotope>()?;
    m.add_class::<PyTask>()?;
    m.add_function(wrap_pyfunction!(parse_vnnlib, m)?)?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(split_scores, m)?)?;
    m.add_function(wrap_pyfunction!(tighten_factor_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(exact_box_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(parse_witness, m)?)?;
    Ok(())
}
