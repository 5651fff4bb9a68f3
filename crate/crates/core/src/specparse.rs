//! VNN-LIB property subset and the counterexample witness format.
//!
//! Supported: `(declare-const X_i Real)`, `(declare-const Y_j Real)`, input bounds
//! `(assert (<= X_i c))` / `(assert (>= X_i c))`, and output assertions built from linear
//! comparisons combined with `and` / `or`. Top-level assertions are conjoined and the whole
//! output condition is brought into disjunctive normal form; each conjunction becomes one
//! unsafe polytope `A·y ≤ b`. Strict comparisons are read as non-strict.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::setlib::{HPolytope, Interval};

/// Input box plus a disjunction of unsafe output polytopes.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationTask {
    pub input_box: Interval,
    pub unsafe_sets: Vec<HPolytope>,
}

impl VerificationTask {
    pub fn new(input_box: Interval, unsafe_sets: Vec<HPolytope>) -> Result<Self> {
        if unsafe_sets.is_empty() {
            return Err(Error::Invalid("task needs at least one unsafe polytope".into()));
        }
        if input_box.is_empty() {
            return Err(Error::Invalid("input box is empty".into()));
        }
        let width = unsafe_sets[0].dim();
        if unsafe_sets.iter().any(|p| p.dim() != width) {
            return Err(Error::Dimension("unsafe polytopes have different widths".into()));
        }
        Ok(Self { input_box, unsafe_sets })
    }

    pub fn input_dim(&self) -> usize {
        self.input_box.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.unsafe_sets[0].dim()
    }

    /// Index of the first unsafe polytope containing `y`, if any.
    pub fn violated_by(&self, y: &DVector<f64>, tol: f64) -> Option<usize> {
        self.unsafe_sets.iter().position(|p| p.contains(y, tol))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Sexp {
    Atom(String, usize),
    List(Vec<Sexp>, usize),
}

impl Sexp {
    fn line(&self) -> usize {
        match self {
            Sexp::Atom(_, l) | Sexp::List(_, l) => *l,
        }
    }

    fn head(&self) -> Option<&str> {
        match self {
            Sexp::List(items, _) => match items.first() {
                Some(Sexp::Atom(s, _)) => Some(s.as_str()),
                _ => None,
            },
            _ => None,
        }
    }
}

fn vnn_err(location: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::VnnLib { location: location.into(), msg: msg.into() }
}

fn tokenize(text: &str) -> Vec<(String, usize)> {
    let mut tokens = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split(';').next().unwrap_or("");
        let mut cur = String::new();
        for ch in line.chars() {
            match ch {
                '(' | ')' => {
                    if !cur.is_empty() {
                        tokens.push((std::mem::take(&mut cur), ln + 1));
                    }
                    tokens.push((ch.to_string(), ln + 1));
                }
                c if c.is_whitespace() => {
                    if !cur.is_empty() {
                        tokens.push((std::mem::take(&mut cur), ln + 1));
                    }
                }
                c => cur.push(c),
            }
        }
        if !cur.is_empty() {
            tokens.push((cur, ln + 1));
        }
    }
    tokens
}

fn parse_sexps(text: &str) -> Result<Vec<Sexp>> {
    let tokens = tokenize(text);
    let mut stack: Vec<(Vec<Sexp>, usize)> = Vec::new();
    let mut top = Vec::new();
    for (tok, line) in tokens {
        match tok.as_str() {
            "(" => stack.push((Vec::new(), line)),
            ")" => {
                let (items, start) = stack
                    .pop()
                    .ok_or_else(|| vnn_err(format!("line {line}"), "unbalanced ')'"))?;
                let node = Sexp::List(items, start);
                match stack.last_mut() {
                    Some((parent, _)) => parent.push(node),
                    None => top.push(node),
                }
            }
            _ => {
                let node = Sexp::Atom(tok, line);
                match stack.last_mut() {
                    Some((parent, _)) => parent.push(node),
                    None => top.push(node),
                }
            }
        }
    }
    if let Some((_, start)) = stack.last() {
        return Err(vnn_err(format!("line {start}"), "unclosed '('"));
    }
    Ok(top)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Var {
    X(usize),
    Y(usize),
}

fn parse_var(name: &str) -> Option<Var> {
    let (kind, idx) = name.split_once('_')?;
    let idx: usize = idx.parse().ok()?;
    match kind {
        "X" => Some(Var::X(idx)),
        "Y" => Some(Var::Y(idx)),
        _ => None,
    }
}

/// `x·coef_x + y·coef_y + constant`.
#[derive(Debug, Clone)]
struct LinExpr {
    x: Vec<f64>,
    y: Vec<f64>,
    constant: f64,
}

impl LinExpr {
    fn zero(n0: usize, nk: usize) -> Self {
        Self { x: vec![0.0; n0], y: vec![0.0; nk], constant: 0.0 }
    }

    fn is_constant(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|c| *c == 0.0)
    }

    fn scale(mut self, s: f64) -> Self {
        self.x.iter_mut().chain(self.y.iter_mut()).for_each(|c| *c *= s);
        self.constant *= s;
        self
    }

    fn add(mut self, other: &LinExpr) -> Self {
        for (a, b) in self.x.iter_mut().zip(&other.x) {
            *a += b;
        }
        for (a, b) in self.y.iter_mut().zip(&other.y) {
            *a += b;
        }
        self.constant += other.constant;
        self
    }
}

/// One output row `a·y ≤ b`.
#[derive(Debug, Clone)]
struct Row {
    a: Vec<f64>,
    b: f64,
}

type Dnf = Vec<Vec<Row>>;

struct Parser {
    n0: usize,
    nk: usize,
    declared: BTreeSet<Var>,
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
}

fn parse_number(s: &str) -> Option<f64> {
    let v: f64 = s.parse().ok()?;
    v.is_finite().then_some(v)
}

impl Parser {
    fn expr(&self, e: &Sexp, path: &str) -> Result<LinExpr> {
        match e {
            Sexp::Atom(s, _) => {
                if let Some(v) = parse_number(s) {
                    let mut out = LinExpr::zero(self.n0, self.nk);
                    out.constant = v;
                    return Ok(out);
                }
                match parse_var(s) {
                    Some(var) if self.declared.contains(&var) => {
                        let mut out = LinExpr::zero(self.n0, self.nk);
                        match var {
                            Var::X(i) => out.x[i] = 1.0,
                            Var::Y(j) => out.y[j] = 1.0,
                        }
                        Ok(out)
                    }
                    _ => Err(vnn_err(path, format!("unknown symbol {s}"))),
                }
            }
            Sexp::List(items, _) => {
                let op = e.head().ok_or_else(|| vnn_err(path, "expected an operator"))?;
                let args: Vec<LinExpr> = items[1..]
                    .iter()
                    .enumerate()
                    .map(|(i, a)| self.expr(a, &format!("{path} > {op}[{i}]")))
                    .collect::<Result<_>>()?;
                match (op, args.len()) {
                    (_, 0) => Err(vnn_err(path, format!("operator {op} without arguments"))),
                    ("+", _) => Ok(args.iter().skip(1).fold(args[0].clone(), |acc, a| acc.add(a))),
                    ("-", 1) => Ok(args[0].clone().scale(-1.0)),
                    ("-", _) => Ok(args
                        .iter()
                        .skip(1)
                        .fold(args[0].clone(), |acc, a| acc.add(&a.clone().scale(-1.0)))),
                    ("*", _) => {
                        let mut non_const = args.iter().filter(|a| !a.is_constant());
                        let var_part = non_const.next();
                        if non_const.next().is_some() {
                            return Err(vnn_err(path, "non-linear atom: product of variables"));
                        }
                        let factor: f64 =
                            args.iter().filter(|a| a.is_constant()).map(|a| a.constant).product();
                        match var_part {
                            Some(v) => Ok(v.clone().scale(factor)),
                            None => {
                                let mut out = LinExpr::zero(self.n0, self.nk);
                                out.constant = factor;
                                Ok(out)
                            }
                        }
                    }
                    _ => Err(vnn_err(path, format!("unsupported operator {op}"))),
                }
            }
        }
    }

    /// Returns `lhs − rhs` canonicalized so that the atom reads `expr ≤ 0`.
    fn comparison(&self, e: &Sexp, path: &str) -> Result<LinExpr> {
        let Sexp::List(items, _) = e else {
            return Err(vnn_err(path, "expected a comparison"));
        };
        let op = e.head().unwrap_or("");
        let sign = match op {
            "<=" | "<" => 1.0,
            ">=" | ">" => -1.0,
            _ => return Err(vnn_err(path, format!("unsupported comparison {op:?}"))),
        };
        if items.len() != 3 {
            return Err(vnn_err(path, format!("comparison {op} needs exactly two operands")));
        }
        let lhs = self.expr(&items[1], &format!("{path} > {op}[0]"))?;
        let rhs = self.expr(&items[2], &format!("{path} > {op}[1]"))?;
        Ok(lhs.add(&rhs.scale(-1.0)).scale(sign))
    }

    fn input_bound(&mut self, lin: &LinExpr, path: &str) -> Result<()> {
        let nz: Vec<usize> = (0..self.n0).filter(|&i| lin.x[i] != 0.0).collect();
        if nz.len() != 1 {
            return Err(vnn_err(path, "input constraint must bound a single variable"));
        }
        let i = nz[0];
        let c = lin.x[i];
        let bound = -lin.constant / c;
        if c > 0.0 {
            self.upper[i] = Some(self.upper[i].map_or(bound, |u| u.min(bound)));
        } else {
            self.lower[i] = Some(self.lower[i].map_or(bound, |l| l.max(bound)));
        }
        Ok(())
    }

    /// DNF of an output formula. Input bounds are accepted only outside disjunctions.
    fn formula(&mut self, e: &Sexp, path: &str, in_or: bool) -> Result<Dnf> {
        match e.head() {
            Some("and") => {
                let Sexp::List(items, _) = e else { unreachable!() };
                let mut acc: Dnf = vec![vec![]];
                for (i, item) in items[1..].iter().enumerate() {
                    let part = self.formula(item, &format!("{path} > and[{i}]"), in_or)?;
                    acc = cross(&acc, &part);
                }
                Ok(acc)
            }
            Some("or") => {
                let Sexp::List(items, _) = e else { unreachable!() };
                let mut out = Vec::new();
                for (i, item) in items[1..].iter().enumerate() {
                    out.extend(self.formula(item, &format!("{path} > or[{i}]"), true)?);
                }
                if out.is_empty() {
                    return Err(vnn_err(path, "empty disjunction"));
                }
                Ok(out)
            }
            _ => {
                let lin = self.comparison(e, path)?;
                let has_x = lin.x.iter().any(|c| *c != 0.0);
                let has_y = lin.y.iter().any(|c| *c != 0.0);
                match (has_x, has_y) {
                    (true, true) => Err(vnn_err(path, "atom mixes input and output variables")),
                    (true, false) if in_or => {
                        Err(vnn_err(path, "input constraint inside a disjunction is not supported"))
                    }
                    (true, false) => {
                        self.input_bound(&lin, path)?;
                        Ok(vec![vec![]])
                    }
                    (false, true) => Ok(vec![vec![Row { a: lin.y.clone(), b: -lin.constant }]]),
                    (false, false) => Err(vnn_err(path, "comparison between constants")),
                }
            }
        }
    }
}

fn cross(a: &Dnf, b: &Dnf) -> Dnf {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push(x.iter().chain(y.iter()).cloned().collect());
        }
    }
    out
}

/// Parse a VNN-LIB property for a network with `n0` inputs and `nk` outputs.
pub fn parse_vnnlib(text: &str, n0: usize, nk: usize) -> Result<VerificationTask> {
    let forms = parse_sexps(text)?;
    let mut p = Parser {
        n0,
        nk,
        declared: BTreeSet::new(),
        lower: vec![None; n0],
        upper: vec![None; n0],
    };
    let mut output: Option<Dnf> = None;
    for (idx, form) in forms.iter().enumerate() {
        let path = format!("form {} (line {})", idx + 1, form.line());
        let Sexp::List(items, _) = form else {
            return Err(vnn_err(path, "expected a parenthesized command"));
        };
        match form.head() {
            Some("declare-const") => {
                let name = match items.get(1) {
                    Some(Sexp::Atom(s, _)) => s.clone(),
                    _ => return Err(vnn_err(path, "declare-const needs a name")),
                };
                match items.get(2) {
                    Some(Sexp::Atom(t, _)) if t == "Real" => {}
                    _ => return Err(vnn_err(path, format!("{name} must be declared Real"))),
                }
                let var = match parse_var(&name) {
                    Some(Var::X(i)) if i < n0 => Var::X(i),
                    Some(Var::Y(j)) if j < nk => Var::Y(j),
                    _ => return Err(vnn_err(path, format!("unknown symbol {name}"))),
                };
                p.declared.insert(var);
            }
            Some("assert") => {
                if items.len() != 2 {
                    return Err(vnn_err(path, "assert takes exactly one formula"));
                }
                let dnf = p.formula(&items[1], &format!("{path} > assert"), false)?;
                let only_inputs = dnf.len() == 1 && dnf[0].is_empty();
                if !only_inputs {
                    output = Some(match output {
                        Some(prev) => cross(&prev, &dnf),
                        None => dnf,
                    });
                }
            }
            Some("set-logic") | Some("set-info") | Some("check-sat") | Some("exit") => {}
            other => {
                return Err(vnn_err(path, format!("unsupported command {:?}", other.unwrap_or(""))));
            }
        }
    }
    let mut lower = DVector::zeros(n0);
    let mut upper = DVector::zeros(n0);
    for i in 0..n0 {
        match (p.lower[i], p.upper[i]) {
            (Some(l), Some(u)) => {
                if l > u {
                    return Err(vnn_err("input bounds", format!("input variable X_{i} has empty range [{l}, {u}]")));
                }
                lower[i] = l;
                upper[i] = u;
            }
            _ => return Err(vnn_err("input bounds", format!("input variable X_{i} unbounded"))),
        }
    }
    let output = output.ok_or_else(|| vnn_err("end of file", "no output constraint"))?;
    let unsafe_sets = output
        .into_iter()
        .map(|rows| {
            let a = DMatrix::from_fn(rows.len(), nk, |r, c| rows[r].a[c]);
            let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.b));
            HPolytope::new(a, b)
        })
        .collect::<Result<Vec<_>>>()?;
    VerificationTask::new(Interval::new(lower, upper)?, unsafe_sets)
}

/// Witness body `((X_0 v)\n...\n(Y_0 v)\n...)` without the leading result word.
pub fn witness_body(x: &DVector<f64>, y: &DVector<f64>) -> String {
    let entries: Vec<String> = x
        .iter()
        .enumerate()
        .map(|(i, v)| format!("(X_{i} {v})"))
        .chain(y.iter().enumerate().map(|(j, v)| format!("(Y_{j} {v})")))
        .collect();
    format!("({})", entries.join("\n"))
}

/// Counterexample file: `sat` followed by the assignment.
pub fn write_witness(x: &DVector<f64>, y: &DVector<f64>) -> String {
    let mut out = String::from("sat\n");
    let _ = writeln!(out, "{}", witness_body(x, y));
    out
}

/// Read back a witness written by [`write_witness`] (the leading `sat` is optional).
pub fn parse_witness(text: &str) -> Result<(DVector<f64>, DVector<f64>)> {
    let forms = parse_sexps(text).map_err(|e| Error::Witness(e.to_string()))?;
    let mut forms = forms.iter().peekable();
    if let Some(Sexp::Atom(word, _)) = forms.peek() {
        if word != "sat" {
            return Err(Error::Witness(format!("unexpected result word {word:?}")));
        }
        forms.next();
    }
    let Some(Sexp::List(entries, _)) = forms.next() else {
        return Err(Error::Witness("missing assignment list".into()));
    };
    if forms.next().is_some() {
        return Err(Error::Witness("trailing data after assignment".into()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for entry in entries {
        let Sexp::List(pair, line) = entry else {
            return Err(Error::Witness("expected (NAME value) pairs".into()));
        };
        let (name, value) = match pair.as_slice() {
            [Sexp::Atom(n, _), Sexp::Atom(v, _)] => (n, v),
            _ => return Err(Error::Witness(format!("malformed entry at line {line}"))),
        };
        let value = parse_number(value)
            .ok_or_else(|| Error::Witness(format!("bad value {value:?} for {name}")))?;
        match parse_var(name) {
            Some(Var::X(i)) => xs.push((i, value)),
            Some(Var::Y(j)) => ys.push((j, value)),
            None => return Err(Error::Witness(format!("unknown variable {name}"))),
        }
    }
    let collect = |mut v: Vec<(usize, f64)>, kind: &str| -> Result<DVector<f64>> {
        v.sort_by_key(|(i, _)| *i);
        if v.iter().enumerate().any(|(k, (i, _))| k != *i) {
            return Err(Error::Witness(format!("{kind} indices are not contiguous from 0")));
        }
        Ok(DVector::from_iterator(v.len(), v.into_iter().map(|(_, x)| x)))
    };
    Ok((collect(xs, "X")?, collect(ys, "Y")?))
}
