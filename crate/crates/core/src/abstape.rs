//! Evaluation tapes for abs-smooth functions.
//!
//! A [`Tape`] is a straight-line program over smooth elementals plus `abs`.
//! `max`/`min` are accepted on input and rewritten through `abs` at
//! construction, so the only non-smooth node kind left on the tape is
//! [`Node::Abs`]. The arguments of the abs nodes, in tape order, are the
//! switching variables `z_1..z_s`.

use std::fmt;

use ndarray::Array2;
use thiserror::Error;

use crate::plmodel::{kink_tolerance, AbsLinearForm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("unsupported elemental `{0}`")]
    UnsupportedElemental(String),
    #[error("node {node} references node {reference}, which is not an earlier node")]
    DanglingReference { node: usize, reference: usize },
    #[error("node {node} reads input {index} but the tape has {input_dim} inputs")]
    InputOutOfRange {
        node: usize,
        index: usize,
        input_dim: usize,
    },
    #[error("tape needs at least one input")]
    NoInputs,
    #[error("tape has no nodes")]
    Empty,
    #[error("domain error at node {node} ({op})")]
    Domain { node: usize, op: &'static str },
    #[error("point has dimension {got}, tape expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Elemental operations accepted when building a tape. Operands are indices
/// of earlier operations in the same program.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input(usize),
    Const(f64),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Square(usize),
    Exp(usize),
    Scale(f64, usize),
    Abs(usize),
    Max(usize, usize),
    Min(usize, usize),
    /// `constant + sum(coef * operand)`.
    Affine {
        terms: Vec<(usize, f64)>,
        constant: f64,
    },
}

/// Operations as stored on a constructed tape (no `max`/`min`).
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Input(usize),
    Const(f64),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Square(usize),
    Exp(usize),
    Scale(f64, usize),
    Abs(usize),
    Affine {
        terms: Vec<(usize, f64)>,
        constant: f64,
    },
}

impl Node {
    fn name(&self) -> &'static str {
        match self {
            Node::Input(_) => "input",
            Node::Const(_) => "const",
            Node::Add(..) => "add",
            Node::Sub(..) => "sub",
            Node::Mul(..) => "mul",
            Node::Div(..) => "div",
            Node::Neg(_) => "neg",
            Node::Square(_) => "square",
            Node::Exp(_) => "exp",
            Node::Scale(..) => "scale",
            Node::Abs(_) => "abs",
            Node::Affine { .. } => "affine",
        }
    }
}

/// Handle to a node while building a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

/// Records a program op by op; `finish` validates it and produces a [`Tape`].
#[derive(Debug, Clone)]
pub struct TapeBuilder {
    input_dim: usize,
    ops: Vec<Op>,
}

impl TapeBuilder {
    pub fn new(input_dim: usize) -> Self {
        TapeBuilder {
            input_dim,
            ops: Vec::new(),
        }
    }

    fn push(&mut self, op: Op) -> Var {
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    pub fn input(&mut self, i: usize) -> Var {
        self.push(Op::Input(i))
    }

    /// All inputs in order.
    pub fn inputs(&mut self) -> Vec<Var> {
        (0..self.input_dim).map(|i| self.input(i)).collect()
    }

    pub fn constant(&mut self, r: f64) -> Var {
        self.push(Op::Const(r))
    }

    pub fn add(&mut self, u: Var, w: Var) -> Var {
        self.push(Op::Add(u.0, w.0))
    }

    pub fn sub(&mut self, u: Var, w: Var) -> Var {
        self.push(Op::Sub(u.0, w.0))
    }

    pub fn mul(&mut self, u: Var, w: Var) -> Var {
        self.push(Op::Mul(u.0, w.0))
    }

    pub fn div(&mut self, u: Var, w: Var) -> Var {
        self.push(Op::Div(u.0, w.0))
    }

    pub fn neg(&mut self, u: Var) -> Var {
        self.push(Op::Neg(u.0))
    }

    pub fn square(&mut self, u: Var) -> Var {
        self.push(Op::Square(u.0))
    }

    pub fn exp(&mut self, u: Var) -> Var {
        self.push(Op::Exp(u.0))
    }

    pub fn scale(&mut self, r: f64, u: Var) -> Var {
        self.push(Op::Scale(r, u.0))
    }

    pub fn abs(&mut self, u: Var) -> Var {
        self.push(Op::Abs(u.0))
    }

    pub fn max(&mut self, u: Var, w: Var) -> Var {
        self.push(Op::Max(u.0, w.0))
    }

    pub fn min(&mut self, u: Var, w: Var) -> Var {
        self.push(Op::Min(u.0, w.0))
    }

    pub fn affine(&mut self, terms: &[(Var, f64)], constant: f64) -> Var {
        self.push(Op::Affine {
            terms: terms.iter().map(|&(v, c)| (v.0, c)).collect(),
            constant,
        })
    }

    /// Left fold with `max`; a single operand is returned unchanged.
    pub fn max_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.max(acc, v);
        }
        acc
    }

    pub fn finish(self, output: Var) -> Result<Tape, TapeError> {
        Tape::from_ops(self.input_dim, &self.ops, output.0)
    }
}

/// Straight-line program for an abs-smooth function `R^n -> R`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    input_dim: usize,
    nodes: Vec<Node>,
    output: usize,
    /// Tape indices of the abs nodes, in evaluation order.
    switching_order: Vec<usize>,
    /// For every node, its switching index if it is an abs node.
    switch_index: Vec<Option<usize>>,
}

/// Values produced by one forward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub y: f64,
    /// Switching values: the argument fed to each abs node.
    pub z: Vec<f64>,
    pub node_values: Vec<f64>,
}

impl Tape {
    /// Validates `ops` and stores them with `max`/`min` rewritten via `abs`:
    /// `max(u,w) = (u + w + |u - w|)/2`, `min(u,w) = (u + w - |u - w|)/2`.
    pub fn from_ops(input_dim: usize, ops: &[Op], output: usize) -> Result<Tape, TapeError> {
        if input_dim == 0 {
            return Err(TapeError::NoInputs);
        }
        if ops.is_empty() {
            return Err(TapeError::Empty);
        }
        if output >= ops.len() {
            return Err(TapeError::DanglingReference {
                node: ops.len(),
                reference: output,
            });
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(ops.len());
        // program index -> tape index
        let mut remap: Vec<usize> = Vec::with_capacity(ops.len());
        for (k, op) in ops.iter().enumerate() {
            let r = |i: usize| -> Result<usize, TapeError> {
                if i < k {
                    Ok(remap[i])
                } else {
                    Err(TapeError::DanglingReference {
                        node: k,
                        reference: i,
                    })
                }
            };
            let node = match op {
                Op::Input(i) => {
                    if *i >= input_dim {
                        return Err(TapeError::InputOutOfRange {
                            node: k,
                            index: *i,
                            input_dim,
                        });
                    }
                    Node::Input(*i)
                }
                Op::Const(c) => Node::Const(*c),
                Op::Add(u, w) => Node::Add(r(*u)?, r(*w)?),
                Op::Sub(u, w) => Node::Sub(r(*u)?, r(*w)?),
                Op::Mul(u, w) => Node::Mul(r(*u)?, r(*w)?),
                Op::Div(u, w) => Node::Div(r(*u)?, r(*w)?),
                Op::Neg(u) => Node::Neg(r(*u)?),
                Op::Square(u) => Node::Square(r(*u)?),
                Op::Exp(u) => Node::Exp(r(*u)?),
                Op::Scale(c, u) => Node::Scale(*c, r(*u)?),
                Op::Abs(u) => Node::Abs(r(*u)?),
                Op::Max(u, w) | Op::Min(u, w) => {
                    let (u, w) = (r(*u)?, r(*w)?);
                    let sign = if matches!(op, Op::Max(..)) { 0.5 } else { -0.5 };
                    nodes.push(Node::Sub(u, w));
                    let diff = nodes.len() - 1;
                    nodes.push(Node::Abs(diff));
                    let abs = nodes.len() - 1;
                    Node::Affine {
                        terms: vec![(u, 0.5), (w, 0.5), (abs, sign)],
                        constant: 0.0,
                    }
                }
                Op::Affine { terms, constant } => Node::Affine {
                    terms: terms
                        .iter()
                        .map(|&(i, c)| r(i).map(|i| (i, c)))
                        .collect::<Result<_, _>>()?,
                    constant: *constant,
                },
            };
            nodes.push(node);
            remap.push(nodes.len() - 1);
        }
        let mut switching_order = Vec::new();
        let mut switch_index = vec![None; nodes.len()];
        for (k, node) in nodes.iter().enumerate() {
            if let Node::Abs(_) = node {
                switch_index[k] = Some(switching_order.len());
                switching_order.push(k);
            }
        }
        Ok(Tape {
            input_dim,
            output: remap[output],
            nodes,
            switching_order,
            switch_index,
        })
    }

    /// Parses a line-oriented program. Each non-empty line that does not
    /// start with `#` defines the next node:
    ///
    /// ```text
    /// input 0
    /// input 1
    /// square 0
    /// square 1
    /// max 2 3
    /// affine <const> <node>:<coef> ...
    /// scale <r> <node>
    /// const <r>
    /// output 4
    /// ```
    ///
    /// `output k` is optional and defaults to the last node. The input
    /// dimension is one more than the largest input index used.
    pub fn parse(text: &str) -> Result<Tape, TapeError> {
        let mut ops = Vec::new();
        let mut output = None;
        let mut input_dim = 0usize;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: String| TapeError::Parse {
                line: lineno + 1,
                msg,
            };
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap();
            let args: Vec<&str> = parts.collect();
            let idx = |s: &str| -> Result<usize, TapeError> {
                s.parse::<usize>()
                    .map_err(|_| perr(format!("expected node index, got `{s}`")))
            };
            let num = |s: &str| -> Result<f64, TapeError> {
                s.parse::<f64>()
                    .map_err(|_| perr(format!("expected number, got `{s}`")))
            };
            let want = |k: usize| -> Result<(), TapeError> {
                if args.len() == k {
                    Ok(())
                } else {
                    Err(perr(format!("`{name}` takes {k} arguments")))
                }
            };
            let op = match name {
                "input" => {
                    want(1)?;
                    let i = idx(args[0])?;
                    input_dim = input_dim.max(i + 1);
                    Op::Input(i)
                }
                "const" => {
                    want(1)?;
                    Op::Const(num(args[0])?)
                }
                "add" | "sub" | "mul" | "div" | "max" | "min" => {
                    want(2)?;
                    let (u, w) = (idx(args[0])?, idx(args[1])?);
                    match name {
                        "add" => Op::Add(u, w),
                        "sub" => Op::Sub(u, w),
                        "mul" => Op::Mul(u, w),
                        "div" => Op::Div(u, w),
                        "max" => Op::Max(u, w),
                        _ => Op::Min(u, w),
                    }
                }
                "neg" | "square" | "exp" | "abs" => {
                    want(1)?;
                    let u = idx(args[0])?;
                    match name {
                        "neg" => Op::Neg(u),
                        "square" => Op::Square(u),
                        "exp" => Op::Exp(u),
                        _ => Op::Abs(u),
                    }
                }
                "scale" => {
                    want(2)?;
                    Op::Scale(num(args[0])?, idx(args[1])?)
                }
                "affine" => {
                    if args.is_empty() {
                        return Err(perr("`affine` needs a constant".into()));
                    }
                    let constant = num(args[0])?;
                    let mut terms = Vec::new();
                    for t in &args[1..] {
                        let (i, c) = t
                            .split_once(':')
                            .ok_or_else(|| perr(format!("expected node:coef, got `{t}`")))?;
                        terms.push((idx(i)?, num(c)?));
                    }
                    Op::Affine { terms, constant }
                }
                "output" => {
                    want(1)?;
                    output = Some(idx(args[0])?);
                    continue;
                }
                other => return Err(TapeError::UnsupportedElemental(other.to_string())),
            };
            ops.push(op);
        }
        if ops.is_empty() {
            return Err(TapeError::Empty);
        }
        let output = output.unwrap_or(ops.len() - 1);
        Tape::from_ops(input_dim, &ops, output)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Number of switching variables `s`.
    pub fn num_switches(&self) -> usize {
        self.switching_order.len()
    }

    pub fn switching_order(&self) -> &[usize] {
        &self.switching_order
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output_node(&self) -> usize {
        self.output
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), TapeError> {
        if x.len() != self.input_dim {
            return Err(TapeError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn node_value(&self, k: usize, vals: &[f64], x: &[f64]) -> Result<f64, TapeError> {
        let node = &self.nodes[k];
        let v = match *node {
            Node::Input(i) => x[i],
            Node::Const(c) => c,
            Node::Add(u, w) => vals[u] + vals[w],
            Node::Sub(u, w) => vals[u] - vals[w],
            Node::Mul(u, w) => vals[u] * vals[w],
            Node::Div(u, w) => {
                if vals[w] == 0.0 {
                    return Err(TapeError::Domain { node: k, op: "div" });
                }
                vals[u] / vals[w]
            }
            Node::Neg(u) => -vals[u],
            Node::Square(u) => vals[u] * vals[u],
            Node::Exp(u) => vals[u].exp(),
            Node::Scale(c, u) => c * vals[u],
            Node::Abs(u) => vals[u].abs(),
            Node::Affine {
                ref terms,
                constant,
            } => terms.iter().fold(constant, |acc, &(i, c)| acc + c * vals[i]),
        };
        if !v.is_finite() {
            return Err(TapeError::Domain {
                node: k,
                op: node.name(),
            });
        }
        Ok(v)
    }

    pub fn eval(&self, x: &[f64]) -> Result<EvalRecord, TapeError> {
        self.check_dim(x)?;
        let mut vals = Vec::with_capacity(self.nodes.len());
        for k in 0..self.nodes.len() {
            let v = self.node_value(k, &vals, x)?;
            vals.push(v);
        }
        let z = self
            .switching_order
            .iter()
            .map(|&k| match self.nodes[k] {
                Node::Abs(u) => vals[u],
                _ => unreachable!(),
            })
            .collect();
        Ok(EvalRecord {
            y: vals[self.output],
            z,
            node_values: vals,
        })
    }

    /// Function value only.
    pub fn value(&self, x: &[f64]) -> Result<f64, TapeError> {
        self.eval(x).map(|r| r.y)
    }

    /// Forward sweep carrying sparse tangents. Variables `0..n` are the
    /// inputs; with [`AbsRule::Variables`], variables `n..n+s` stand for the
    /// abs node outputs `|z_i|`, otherwise abs nodes propagate `sign(u) du`
    /// with the rule's value of `sign(0)`.
    fn forward_tangents(
        &self,
        x: &[f64],
        rule: AbsRule,
    ) -> Result<(Vec<f64>, Vec<Tangent>), TapeError> {
        self.check_dim(x)?;
        let n = self.input_dim;
        let mut vals: Vec<f64> = Vec::with_capacity(self.nodes.len());
        let mut tans: Vec<Tangent> = Vec::with_capacity(self.nodes.len());
        for k in 0..self.nodes.len() {
            let v = self.node_value(k, &vals, x)?;
            let t = match self.nodes[k] {
                Node::Input(i) => Tangent(vec![(i, 1.0)]),
                Node::Const(_) => Tangent::default(),
                Node::Add(u, w) => Tangent::combine(&tans[u], 1.0, &tans[w], 1.0),
                Node::Sub(u, w) => Tangent::combine(&tans[u], 1.0, &tans[w], -1.0),
                Node::Mul(u, w) => Tangent::combine(&tans[u], vals[w], &tans[w], vals[u]),
                Node::Div(u, w) => {
                    let inv = 1.0 / vals[w];
                    Tangent::combine(&tans[u], inv, &tans[w], -vals[u] * inv * inv)
                }
                Node::Neg(u) => tans[u].scaled(-1.0),
                Node::Square(u) => tans[u].scaled(2.0 * vals[u]),
                Node::Exp(u) => tans[u].scaled(v),
                Node::Scale(c, u) => tans[u].scaled(c),
                Node::Abs(u) => match rule {
                    AbsRule::Variables => {
                        let i = self.switch_index[k].expect("abs node has a switching index");
                        Tangent(vec![(n + i, 1.0)])
                    }
                    AbsRule::Sign(zero) => {
                        let zu = vals[u];
                        if zu.abs() <= kink_tolerance(zu) {
                            tans[u].scaled(zero)
                        } else {
                            tans[u].scaled(zu.signum())
                        }
                    }
                },
                Node::Affine { ref terms, .. } => {
                    Tangent::sum(terms.iter().map(|&(i, c)| (&tans[i], c)))
                }
            };
            vals.push(v);
            tans.push(t);
        }
        Ok((vals, tans))
    }

    /// Abs-linear form of the function localized at `anchor`.
    ///
    /// Smooth nodes propagate tangents at the anchor values; every abs node
    /// contributes a fresh variable `|z_i|`, so the model increment of
    /// `|u|` is `|u_0 + du| - |u_0|`. The resulting `M` is zero: each
    /// switching argument is expressed through `x` and earlier `|z_j|`.
    pub fn abs_linearize(&self, anchor: &[f64]) -> Result<AbsLinearForm, TapeError> {
        let (vals, tans) = self.forward_tangents(anchor, AbsRule::Variables)?;
        let n = self.input_dim;
        let s = self.num_switches();
        let mut z_mat = Array2::zeros((s, n));
        let mut lower: Vec<Vec<(usize, f64, f64)>> = Vec::with_capacity(s);
        let mut z_anchor = Vec::with_capacity(s);
        for (i, &k) in self.switching_order.iter().enumerate() {
            let u = match self.nodes[k] {
                Node::Abs(u) => u,
                _ => unreachable!(),
            };
            z_anchor.push(vals[u]);
            let mut row: Vec<(usize, f64, f64)> = Vec::new();
            for &(j, c) in &tans[u].0 {
                if j < n {
                    z_mat[[i, j]] += c;
                } else {
                    debug_assert!(j - n < i);
                    row.push((j - n, 0.0, c));
                }
            }
            row.sort_by_key(|e| e.0);
            row.dedup_by(|later, first| {
                let same = later.0 == first.0;
                if same {
                    first.2 += later.2;
                }
                same
            });
            row.retain(|e| e.2 != 0.0);
            lower.push(row);
        }
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; s];
        for &(j, c) in &tans[self.output].0 {
            if j < n {
                a[j] += c;
            } else {
                b[j - n] += c;
            }
        }
        Ok(AbsLinearForm::with_couplings(
            anchor.to_vec(),
            vals[self.output],
            z_anchor,
            a,
            b,
            z_mat,
            lower,
        )
        .expect("tape-generated forms are well formed"))
    }

    /// An element of the Clarke subdifferential: chain rule with
    /// `d|u|/du = sign(u)` and `sign(0) = 0`.
    pub fn subgradient(&self, x: &[f64]) -> Result<Vec<f64>, TapeError> {
        self.gradient_with(x, 0.0)
    }

    /// What forward-mode AD returns: `d|u|/du = 1` at `u = 0`. On ties
    /// `max(a, b)` then follows `a`. A one-sided derivative, not always a
    /// Clarke subgradient for nonconvex compositions.
    pub fn subgradient_one_sided(&self, x: &[f64]) -> Result<Vec<f64>, TapeError> {
        self.gradient_with(x, 1.0)
    }

    fn gradient_with(&self, x: &[f64], zero_sign: f64) -> Result<Vec<f64>, TapeError> {
        let (_, tans) = self.forward_tangents(x, AbsRule::Sign(zero_sign))?;
        let mut g = vec![0.0; self.input_dim];
        for &(j, c) in &tans[self.output].0 {
            g[j] += c;
        }
        Ok(g)
    }
}

impl fmt::Display for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "tape: n = {}, s = {}, {} nodes",
            self.input_dim,
            self.num_switches(),
            self.nodes.len()
        )?;
        for (k, node) in self.nodes.iter().enumerate() {
            writeln!(f, "  {k:>4}: {node:?}")?;
        }
        write!(f, "  output: {}", self.output)
    }
}

#[derive(Debug, Clone, Copy)]
enum AbsRule {
    Variables,
    Sign(f64),
}

/// Sparse tangent: `(variable, coefficient)` pairs sorted by variable.
#[derive(Debug, Clone, Default)]
struct Tangent(Vec<(usize, f64)>);

impl Tangent {
    fn scaled(&self, c: f64) -> Tangent {
        if c == 0.0 {
            return Tangent::default();
        }
        Tangent(self.0.iter().map(|&(j, v)| (j, c * v)).collect())
    }

    fn combine(p: &Tangent, cp: f64, q: &Tangent, cq: f64) -> Tangent {
        let mut out = Vec::with_capacity(p.0.len() + q.0.len());
        let (mut i, mut k) = (0, 0);
        while i < p.0.len() || k < q.0.len() {
            let next = match (p.0.get(i), q.0.get(k)) {
                (Some(&(a, va)), Some(&(b, vb))) => {
                    if a == b {
                        i += 1;
                        k += 1;
                        (a, cp * va + cq * vb)
                    } else if a < b {
                        i += 1;
                        (a, cp * va)
                    } else {
                        k += 1;
                        (b, cq * vb)
                    }
                }
                (Some(&(a, va)), None) => {
                    i += 1;
                    (a, cp * va)
                }
                (None, Some(&(b, vb))) => {
                    k += 1;
                    (b, cq * vb)
                }
                (None, None) => unreachable!(),
            };
            out.push(next);
        }
        Tangent(out)
    }

    fn sum<'a>(parts: impl Iterator<Item = (&'a Tangent, f64)>) -> Tangent {
        let mut all: Vec<(usize, f64)> = Vec::new();
        for (t, c) in parts {
            all.extend(t.0.iter().map(|&(j, v)| (j, c * v)));
        }
        all.sort_by_key(|&(j, _)| j);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(all.len());
        for (j, v) in all {
            match out.last_mut() {
                Some(last) if last.0 == j => last.1 += v,
                _ => out.push((j, v)),
            }
        }
        Tangent(out)
    }
}
