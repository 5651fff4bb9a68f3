//! Feed-forward network model, exact evaluation, and the `.nnet` / `.json` loaders.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear { weights: DMatrix<f64>, bias: DVector<f64> },
    Activation { func: Activation, width: usize },
}

impl Layer {
    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Linear { weights, .. } => weights.nrows(),
            Layer::Activation { width, .. } => *width,
        }
    }
}

/// Affine input/output scaling as stored in NNet files.
///
/// The network computes `denorm(raw((x − input_mean) / input_range))` with
/// `denorm(y) = y ∘ output_range + output_mean`. Input min/max are kept for reference only.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub input_min: DVector<f64>,
    pub input_max: DVector<f64>,
    pub input_mean: DVector<f64>,
    pub input_range: DVector<f64>,
    pub output_mean: DVector<f64>,
    pub output_range: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
    normalization: Option<Normalization>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Invalid("network has no layers".into()))?;
        let input_dim = match first {
            Layer::Linear { weights, .. } => weights.ncols(),
            Layer::Activation { .. } => {
                return Err(Error::Invalid("first layer must be linear".into()));
            }
        };
        let mut dim = input_dim;
        for (k, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Linear { weights, bias } => {
                    if weights.ncols() != dim || bias.len() != weights.nrows() {
                        return Err(Error::Dimension(format!(
                            "layer {k}: weights {}x{} and bias of length {} after a {dim}-dimensional layer",
                            weights.nrows(),
                            weights.ncols(),
                            bias.len()
                        )));
                    }
                    if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("layer {k} weights")));
                    }
                }
                Layer::Activation { width, .. } => {
                    if *width == 0 || *width != dim {
                        return Err(Error::Dimension(format!(
                            "layer {k}: activation width {width} after a {dim}-dimensional layer"
                        )));
                    }
                }
            }
            dim = layer.output_dim();
        }
        Ok(Self { layers, input_dim, output_dim: dim, normalization: None })
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        let n0 = self.input_dim;
        let nk = self.output_dim;
        if norm.input_mean.len() != n0
            || norm.input_range.len() != n0
            || norm.output_mean.len() != nk
            || norm.output_range.len() != nk
        {
            return Err(Error::Dimension("normalization vectors do not match network dimensions".into()));
        }
        if norm.input_range.iter().any(|r| *r == 0.0 || !r.is_finite()) {
            return Err(Error::Invalid("input range must be finite and nonzero".into()));
        }
        self.normalization = Some(norm);
        Ok(self)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn relu_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Activation { func: Activation::Relu, width } => *width,
                _ => 0,
            })
            .sum()
    }

    pub fn is_relu_only(&self) -> bool {
        self.layers
            .iter()
            .all(|l| !matches!(l, Layer::Activation { func, .. } if *func != Activation::Relu))
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "input of length {} for network with {} inputs",
                x.len(),
                self.input_dim
            )));
        }
        let mut h = match &self.normalization {
            Some(n) => (x - &n.input_mean).component_div(&n.input_range),
            None => x.clone(),
        };
        for layer in &self.layers {
            h = match layer {
                Layer::Linear { weights, bias } => weights * &h + bias,
                Layer::Activation { func, .. } => h.map(|v| func.apply(v)),
            };
        }
        if let Some(n) = &self.normalization {
            h = h.component_mul(&n.output_range) + &n.output_mean;
        }
        Ok(h)
    }

    /// Equivalent network without normalization: the scaling is folded into the first and
    /// last linear layers (or into added linear layers when the ends are activations).
    pub fn folded(&self) -> Network {
        let Some(norm) = &self.normalization else {
            return self.clone();
        };
        let mut layers = self.layers.clone();
        let inv_range = norm.input_range.map(|r| 1.0 / r);
        let shift = -norm.input_mean.component_mul(&inv_range);
        if let Some(Layer::Linear { weights, bias }) = layers.first_mut() {
            *bias += &*weights * &shift;
            *weights = &*weights * DMatrix::from_diagonal(&inv_range);
        }
        match layers.last_mut() {
            Some(Layer::Linear { weights, bias }) => {
                *weights = DMatrix::from_diagonal(&norm.output_range) * &*weights;
                *bias = bias.component_mul(&norm.output_range) + &norm.output_mean;
            }
            _ => layers.push(Layer::Linear {
                weights: DMatrix::from_diagonal(&norm.output_range),
                bias: norm.output_mean.clone(),
            }),
        }
        Network { layers, input_dim: self.input_dim, output_dim: self.output_dim, normalization: None }
    }
}

/// Load by extension: `.nnet` or `.json`.
pub fn load_network(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("nnet") => parse_nnet(&text),
        Some(ext) if ext.eq_ignore_ascii_case("json") => parse_json_net(&text),
        _ => Err(Error::Invalid(format!(
            "unrecognized network extension for {} (expected .nnet or .json)",
            path.display()
        ))),
    }
}

struct NNetLines<'a> {
    lines: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
    last_line: usize,
}

impl<'a> NNetLines<'a> {
    fn new(text: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = (usize, &'a str)> + 'a> = Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.trim()))
                .filter(|(_, l)| !l.is_empty() && !l.starts_with("//")),
        );
        Self { lines: it.peekable(), last_line: 0 }
    }

    fn next_raw(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.lines.next() {
            Some((n, l)) => {
                self.last_line = n;
                Ok((n, l))
            }
            None => Err(Error::NNet { line: self.last_line + 1, msg: format!("missing {what}") }),
        }
    }

    fn next_values(&mut self, what: &str, expected: usize) -> Result<Vec<f64>> {
        let (n, line) = self.next_raw(what)?;
        let values = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::NNet { line: n, msg: format!("non-numeric token {t:?} in {what}") })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != expected {
            return Err(Error::NNet {
                line: n,
                msg: format!("{what} has {} values, expected {expected}", values.len()),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NNet { line: n, msg: format!("non-finite value {v} in {what}") });
        }
        Ok(values)
    }
}

fn to_count(v: f64, line: usize, what: &str) -> Result<usize> {
    if v.fract() != 0.0 || v < 1.0 {
        return Err(Error::NNet { line, msg: format!("{what} must be a positive integer, got {v}") });
    }
    Ok(v as usize)
}

/// Parse the NNet text format.
///
/// Layout after `//` comment lines: counts line `numLayers,inputSize,outputSize,maxLayerSize`,
/// the layer sizes, one legacy flag line, then input mins, maxes, means, ranges (means and
/// ranges carry one extra trailing entry for the outputs), then per layer its weight rows
/// followed by its bias rows. Every layer but the last is followed by ReLU. A final layer
/// that is exactly the identity with zero bias is dropped, so networks whose output is a
/// ReLU can be stored with an identity output layer.
pub fn parse_nnet(text: &str) -> Result<Network> {
    let mut lines = NNetLines::new(text);
    let counts = lines.next_values("counts line", 4)?;
    let counts_line = lines.last_line;
    let num_layers = to_count(counts[0], counts_line, "numLayers")?;
    let input_size = to_count(counts[1], counts_line, "inputSize")?;
    let output_size = to_count(counts[2], counts_line, "outputSize")?;

    let sizes = lines.next_values("layer sizes", num_layers + 1)?;
    let sizes_line = lines.last_line;
    let sizes = sizes
        .iter()
        .map(|v| to_count(*v, sizes_line, "layer size"))
        .collect::<Result<Vec<_>>>()?;
    if sizes[0] != input_size || sizes[num_layers] != output_size {
        return Err(Error::NNet {
            line: sizes_line,
            msg: "layer sizes disagree with inputSize/outputSize".into(),
        });
    }
    lines.next_raw("legacy flag line")?;
    let mins = lines.next_values("input minimums", input_size)?;
    let maxes = lines.next_values("input maximums", input_size)?;
    let means = lines.next_values("means", input_size + 1)?;
    let ranges = lines.next_values("ranges", input_size + 1)?;
    let ranges_line = lines.last_line;
    if ranges[..input_size].contains(&0.0) {
        return Err(Error::NNet { line: ranges_line, msg: "input range of zero".into() });
    }

    let mut layers = Vec::new();
    for k in 0..num_layers {
        let (rows, cols) = (sizes[k + 1], sizes[k]);
        let mut weights = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            let vals = lines.next_values(&format!("weight row {r} of layer {k}"), cols)?;
            for (c, v) in vals.into_iter().enumerate() {
                weights[(r, c)] = v;
            }
        }
        let mut bias = DVector::zeros(rows);
        for r in 0..rows {
            bias[r] = lines.next_values(&format!("bias row {r} of layer {k}"), 1)?[0];
        }
        layers.push(Layer::Linear { weights, bias });
        if k + 1 < num_layers {
            layers.push(Layer::Activation { func: Activation::Relu, width: rows });
        }
    }
    if let Some((n, _)) = lines.lines.next() {
        return Err(Error::NNet { line: n, msg: "trailing data after last layer".into() });
    }
    if layers.len() > 1 {
        if let Some(Layer::Linear { weights, bias }) = layers.last() {
            if weights.is_square() && *weights == DMatrix::identity(weights.nrows(), weights.ncols()) && bias.iter().all(|b| *b == 0.0) {
                layers.pop();
            }
        }
    }
    let net = Network::new(layers)?;
    let norm = Normalization {
        input_min: DVector::from_vec(mins),
        input_max: DVector::from_vec(maxes),
        input_mean: DVector::from_row_slice(&means[..input_size]),
        input_range: DVector::from_row_slice(&ranges[..input_size]),
        output_mean: DVector::from_element(output_size, means[input_size]),
        output_range: DVector::from_element(output_size, ranges[input_size]),
    };
    net.with_normalization(norm)
}

fn json_err(path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Json { path: path.into(), msg: msg.into() }
}

fn json_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| json_err(path, "expected a number"))
}

fn json_vec(v: &Value, path: &str) -> Result<DVector<f64>> {
    let arr = v.as_array().ok_or_else(|| json_err(path, "expected an array of numbers"))?;
    let vals = arr
        .iter()
        .enumerate()
        .map(|(i, x)| json_f64(x, &format!("{path}[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(vals))
}

fn json_matrix(v: &Value, path: &str) -> Result<DMatrix<f64>> {
    let rows = v.as_array().ok_or_else(|| json_err(path, "expected an array of rows"))?;
    let rows = rows
        .iter()
        .enumerate()
        .map(|(i, r)| json_vec(r, &format!("{path}[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let ncols = rows.first().map_or(0, |r| r.len());
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(json_err(format!("{path}[{i}]"), format!("row length differs from first row ({ncols})")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

/// Parse `{"layers":[{"type":"linear","weights":[[..]],"bias":[..]},{"type":"relu"}, ..]}`.
///
/// An optional `"normalization"` object with `input_mean`, `input_range`, `output_mean`,
/// `output_range` (and optionally `input_min`, `input_max`) is also accepted.
pub fn parse_json_net(text: &str) -> Result<Network> {
    let root: Value = serde_json::from_str(text).map_err(|e| json_err("$", e.to_string()))?;
    let layers_v = root
        .get("layers")
        .and_then(Value::as_array)
        .ok_or_else(|| json_err("$.layers", "missing layers array"))?;
    let mut layers = Vec::with_capacity(layers_v.len());
    let mut width = 0usize;
    for (k, lv) in layers_v.iter().enumerate() {
        let path = format!("$.layers[{k}]");
        let ty = lv
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| json_err(format!("{path}.type"), "missing layer type"))?;
        let layer = match ty {
            "linear" => {
                let weights = json_matrix(
                    lv.get("weights").ok_or_else(|| json_err(format!("{path}.weights"), "missing weights"))?,
                    &format!("{path}.weights"),
                )?;
                let bias = json_vec(
                    lv.get("bias").ok_or_else(|| json_err(format!("{path}.bias"), "missing bias"))?,
                    &format!("{path}.bias"),
                )?;
                if bias.len() != weights.nrows() {
                    return Err(json_err(format!("{path}.bias"), "bias length differs from weight rows"));
                }
                if k > 0 && weights.ncols() != width {
                    return Err(json_err(
                        format!("{path}.weights"),
                        format!("expected {width} columns, found {}", weights.ncols()),
                    ));
                }
                Layer::Linear { weights, bias }
            }
            "relu" | "sigmoid" | "tanh" => {
                if k == 0 {
                    return Err(json_err(path, "first layer must be linear"));
                }
                let func = match ty {
                    "relu" => Activation::Relu,
                    "sigmoid" => Activation::Sigmoid,
                    _ => Activation::Tanh,
                };
                Layer::Activation { func, width }
            }
            other => return Err(json_err(format!("{path}.type"), format!("unsupported layer type {other:?}"))),
        };
        width = layer.output_dim();
        layers.push(layer);
    }
    let mut net = Network::new(layers).map_err(|e| json_err("$.layers", e.to_string()))?;
    if let Some(nv) = root.get("normalization") {
        let field = |name: &str| -> Result<DVector<f64>> {
            let path = format!("$.normalization.{name}");
            json_vec(nv.get(name).ok_or_else(|| json_err(&path, "missing field"))?, &path)
        };
        let input_mean = field("input_mean")?;
        let n0 = input_mean.len();
        let optional = |name: &str, default: f64| -> Result<DVector<f64>> {
            match nv.get(name) {
                Some(v) => json_vec(v, &format!("$.normalization.{name}")),
                None => Ok(DVector::from_element(n0, default)),
            }
        };
        let norm = Normalization {
            input_min: optional("input_min", f64::MIN)?,
            input_max: optional("input_max", f64::MAX)?,
            input_mean,
            input_range: field("input_range")?,
            output_mean: field("output_mean")?,
            output_range: field("output_range")?,
        };
        net = net.with_normalization(norm).map_err(|e| json_err("$.normalization", e.to_string()))?;
    }
    Ok(net)
}

fn vec_json(v: &DVector<f64>) -> Value {
    Value::from(v.iter().copied().collect::<Vec<f64>>())
}

pub fn serialize_json_net(net: &Network) -> String {
    let layers: Vec<Value> = net
        .layers
        .iter()
        .map(|l| match l {
            Layer::Linear { weights, bias } => {
                let rows: Vec<Vec<f64>> =
                    weights.row_iter().map(|r| r.iter().copied().collect()).collect();
                json!({"type": "linear", "weights": rows, "bias": vec_json(bias)})
            }
            Layer::Activation { func, .. } => json!({"type": func.name()}),
        })
        .collect();
    let mut root = json!({ "layers": layers });
    if let Some(n) = &net.normalization {
        root["normalization"] = json!({
            "input_min": vec_json(&n.input_min),
            "input_max": vec_json(&n.input_max),
            "input_mean": vec_json(&n.input_mean),
            "input_range": vec_json(&n.input_range),
            "output_mean": vec_json(&n.output_mean),
            "output_range": vec_json(&n.output_range),
        });
    }
    serde_json::to_string_pretty(&root).expect("network JSON is always serializable")
}
