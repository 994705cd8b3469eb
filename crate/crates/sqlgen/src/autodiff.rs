//! Reverse-mode differentiation over a small registered primitive set:
//! affine maps, pointwise tanh/exp/log, softmax, log-sum-exp, squared
//! error, and weighted means (built from linear combinations).
//!
//! Loss builders receive a [`Tape`] and read parameters only through it,
//! so the same builder can be re-evaluated at perturbed parameters; the
//! contract is the finite-difference check, not the mechanism. All
//! numerics are double precision; log-sum-exp and softmax use
//! max-subtraction.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name} has shape {shape:?}, expected {expected}")]
    WrongShape {
        name: String,
        shape: Shape,
        expected: &'static str,
    },
    #[error("dimension mismatch in {primitive}: {details}")]
    DimensionMismatch {
        primitive: &'static str,
        details: String,
    },
    #[error("non-finite value produced by primitive {primitive}")]
    NonFinite { primitive: &'static str },
    #[error("index {index} out of bounds for length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("parameter {0} contains non-finite entries")]
    NonFiniteParam(String),
    #[error("parameter sets are not congruent: {0}")]
    NotCongruent(String),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("finite-difference check needs at least one probe")]
    NoProbes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn count(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }
}

/// One named parameter array. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn vector(name: &str, data: Vec<f64>) -> Self {
        let shape = Shape::Vector(data.len());
        Tensor {
            name: name.to_string(),
            shape,
            data,
        }
    }

    pub fn matrix(name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Tensor {
            name: name.to_string(),
            shape: Shape::Matrix(rows, cols),
            data,
        }
    }
}

/// Named parameter arrays with recorded shapes and a flat-index view.
/// Shapes are immutable after construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamVector {
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl ParamVector {
    pub fn new(tensors: Vec<Tensor>) -> Result<Self, DiffError> {
        let mut by_name = HashMap::with_capacity(tensors.len());
        let mut offsets = Vec::with_capacity(tensors.len());
        let mut total = 0usize;
        for (i, t) in tensors.iter().enumerate() {
            debug_assert_eq!(t.data.len(), t.shape.count());
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFiniteParam(t.name.clone()));
            }
            if by_name.insert(t.name.clone(), i).is_some() {
                return Err(DiffError::DuplicateParam(t.name.clone()));
            }
            offsets.push(total);
            total += t.shape.count();
        }
        Ok(ParamVector {
            tensors,
            by_name,
            offsets,
            total,
        })
    }

    pub fn total_count(&self) -> usize {
        self.total
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.tensors[i])
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        debug_assert!(flat < self.total);
        let idx = match self.offsets.binary_search(&flat) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        (idx, flat - self.offsets[idx])
    }

    pub fn get_flat(&self, flat: usize) -> f64 {
        let (t, o) = self.locate(flat);
        self.tensors[t].data[o]
    }

    pub fn set_flat(&mut self, flat: usize, value: f64) {
        let (t, o) = self.locate(flat);
        self.tensors[t].data[o] = value;
    }

    /// A short structural signature used for congruence checks.
    pub fn signature(&self) -> Vec<(String, Shape)> {
        self.tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape))
            .collect()
    }

    pub fn congruent_with(&self, other: &ParamVector) -> Result<(), DiffError> {
        if self.signature() != other.signature() {
            return Err(DiffError::NotCongruent(format!(
                "{:?} vs {:?}",
                self.signature(),
                other.signature()
            )));
        }
        Ok(())
    }

    /// Applies `f(self_entry, other_entry)` to every coordinate pair.
    pub fn zip_apply(
        &mut self,
        other: &ParamVector,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<(), DiffError> {
        self.congruent_with(other)?;
        for (a, b) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            for (x, &y) in a.data.iter_mut().zip(b.data.iter()) {
                *x = f(*x, y);
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamVector {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Tensor {
                name: t.name.clone(),
                shape: t.shape,
                data: vec![0.0; t.shape.count()],
            })
            .collect();
        ParamVector::new(tensors).expect("zeros of a valid ParamVector are valid")
    }
}

/// Gradient carrier, structurally congruent to its [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub ParamVector);

impl GradVector {
    pub fn total_count(&self) -> usize {
        self.0.total_count()
    }

    pub fn get_flat(&self, flat: usize) -> f64 {
        self.0.get_flat(flat)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.0.tensor(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VecId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalarId(usize);

enum VecOp {
    Param { param: usize },
    EmbedRow { param: usize, row: usize },
    MatVec { param: usize, x: VecId },
    Add { a: VecId, b: VecId },
    Tanh { a: VecId },
    Exp { a: VecId },
    Log { a: VecId },
    Softmax { a: VecId },
    Concat { parts: Vec<VecId> },
    Const,
}

enum ScalarOp {
    Const,
    Pick { v: VecId, index: usize },
    LogSumExp { v: VecId },
    Lin { terms: Vec<(f64, ScalarId)> },
    Square { s: ScalarId },
}

struct VecNode {
    op: VecOp,
    value: Vec<f64>,
}

struct ScalarNode {
    op: ScalarOp,
    value: f64,
}

/// Records the forward computation; [`backward`] replays it in reverse.
pub struct Tape<'p> {
    params: &'p ParamVector,
    vecs: Vec<VecNode>,
    scalars: Vec<ScalarNode>,
}

fn check_finite_slice(primitive: &'static str, data: &[f64]) -> Result<(), DiffError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite { primitive })
    }
}

fn check_finite(primitive: &'static str, v: f64) -> Result<(), DiffError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DiffError::NonFinite { primitive })
    }
}

/// Stable log Σ exp over a non-empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let m = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Stable softmax over a non-empty slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    debug_assert!(!values.is_empty());
    let m = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = values.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamVector) -> Self {
        Tape {
            params,
            vecs: Vec::new(),
            scalars: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamVector {
        self.params
    }

    fn param_index(&self, name: &str) -> Result<usize, DiffError> {
        self.params
            .by_name
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    fn push_vec(
        &mut self,
        primitive: &'static str,
        op: VecOp,
        value: Vec<f64>,
    ) -> Result<VecId, DiffError> {
        check_finite_slice(primitive, &value)?;
        self.vecs.push(VecNode { op, value });
        Ok(VecId(self.vecs.len() - 1))
    }

    fn push_scalar(
        &mut self,
        primitive: &'static str,
        op: ScalarOp,
        value: f64,
    ) -> Result<ScalarId, DiffError> {
        check_finite(primitive, value)?;
        self.scalars.push(ScalarNode { op, value });
        Ok(ScalarId(self.scalars.len() - 1))
    }

    pub fn value(&self, s: ScalarId) -> f64 {
        self.scalars[s.0].value
    }

    pub fn vec_value(&self, v: VecId) -> &[f64] {
        &self.vecs[v.0].value
    }

    /// A whole vector-shaped parameter as a tape node.
    pub fn param_vec(&mut self, name: &str) -> Result<VecId, DiffError> {
        let param = self.param_index(name)?;
        let t = &self.params.tensors[param];
        match t.shape {
            Shape::Vector(_) => {
                let value = t.data.clone();
                self.push_vec("param", VecOp::Param { param }, value)
            }
            shape => Err(DiffError::WrongShape {
                name: name.to_string(),
                shape,
                expected: "vector",
            }),
        }
    }

    /// One row of a matrix-shaped parameter (embedding lookup).
    pub fn embed_row(&mut self, name: &str, row: usize) -> Result<VecId, DiffError> {
        let param = self.param_index(name)?;
        let t = &self.params.tensors[param];
        match t.shape {
            Shape::Matrix(rows, cols) => {
                if row >= rows {
                    return Err(DiffError::IndexOutOfBounds {
                        index: row,
                        len: rows,
                    });
                }
                let value = t.data[row * cols..(row + 1) * cols].to_vec();
                self.push_vec("embed_row", VecOp::EmbedRow { param, row }, value)
            }
            shape => Err(DiffError::WrongShape {
                name: name.to_string(),
                shape,
                expected: "matrix",
            }),
        }
    }

    /// y = W·x for a matrix-shaped parameter W.
    pub fn matvec(&mut self, name: &str, x: VecId) -> Result<VecId, DiffError> {
        let param = self.param_index(name)?;
        let t = &self.params.tensors[param];
        let (rows, cols) = match t.shape {
            Shape::Matrix(r, c) => (r, c),
            shape => {
                return Err(DiffError::WrongShape {
                    name: name.to_string(),
                    shape,
                    expected: "matrix",
                })
            }
        };
        let xv = &self.vecs[x.0].value;
        if xv.len() != cols {
            return Err(DiffError::DimensionMismatch {
                primitive: "matvec",
                details: format!("{name} is {rows}x{cols}, input has length {}", xv.len()),
            });
        }
        let mut value = vec![0.0; rows];
        for (r, out) in value.iter_mut().enumerate() {
            let row = &t.data[r * cols..(r + 1) * cols];
            *out = row.iter().zip(xv.iter()).map(|(w, x)| w * x).sum();
        }
        self.push_vec("matvec", VecOp::MatVec { param, x }, value)
    }

    pub fn add(&mut self, a: VecId, b: VecId) -> Result<VecId, DiffError> {
        let (av, bv) = (&self.vecs[a.0].value, &self.vecs[b.0].value);
        if av.len() != bv.len() {
            return Err(DiffError::DimensionMismatch {
                primitive: "add",
                details: format!("lengths {} vs {}", av.len(), bv.len()),
            });
        }
        let value = av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect();
        self.push_vec("add", VecOp::Add { a, b }, value)
    }

    pub fn tanh(&mut self, a: VecId) -> Result<VecId, DiffError> {
        let value = self.vecs[a.0].value.iter().map(|v| v.tanh()).collect();
        self.push_vec("tanh", VecOp::Tanh { a }, value)
    }

    pub fn exp(&mut self, a: VecId) -> Result<VecId, DiffError> {
        let value = self.vecs[a.0].value.iter().map(|v| v.exp()).collect();
        self.push_vec("exp", VecOp::Exp { a }, value)
    }

    pub fn log(&mut self, a: VecId) -> Result<VecId, DiffError> {
        let value = self.vecs[a.0].value.iter().map(|v| v.ln()).collect();
        self.push_vec("log", VecOp::Log { a }, value)
    }

    pub fn softmax_vec(&mut self, a: VecId) -> Result<VecId, DiffError> {
        let value = softmax(&self.vecs[a.0].value);
        self.push_vec("softmax", VecOp::Softmax { a }, value)
    }

    pub fn concat(&mut self, parts: &[VecId]) -> Result<VecId, DiffError> {
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(&self.vecs[p.0].value);
        }
        self.push_vec(
            "concat",
            VecOp::Concat {
                parts: parts.to_vec(),
            },
            value,
        )
    }

    /// A constant vector; no gradient flows into it.
    pub fn const_vec(&mut self, data: Vec<f64>) -> Result<VecId, DiffError> {
        self.push_vec("const", VecOp::Const, data)
    }

    pub fn const_scalar(&mut self, value: f64) -> Result<ScalarId, DiffError> {
        self.push_scalar("const", ScalarOp::Const, value)
    }

    /// Projection: element `index` of a vector node.
    pub fn pick(&mut self, v: VecId, index: usize) -> Result<ScalarId, DiffError> {
        let len = self.vecs[v.0].value.len();
        if index >= len {
            return Err(DiffError::IndexOutOfBounds { index, len });
        }
        let value = self.vecs[v.0].value[index];
        self.push_scalar("pick", ScalarOp::Pick { v, index }, value)
    }

    pub fn log_sum_exp(&mut self, v: VecId) -> Result<ScalarId, DiffError> {
        let value = log_sum_exp(&self.vecs[v.0].value);
        self.push_scalar("log_sum_exp", ScalarOp::LogSumExp { v }, value)
    }

    /// Σ coeff_i · s_i + bias. Weighted sums, differences, and masked
    /// means are all expressed through this primitive.
    pub fn lin(&mut self, terms: &[(f64, ScalarId)], bias: f64) -> Result<ScalarId, DiffError> {
        let value = bias
            + terms
                .iter()
                .map(|&(c, s)| c * self.scalars[s.0].value)
                .sum::<f64>();
        self.push_scalar(
            "lin",
            ScalarOp::Lin {
                terms: terms.to_vec(),
            },
            value,
        )
    }

    pub fn square(&mut self, s: ScalarId) -> Result<ScalarId, DiffError> {
        let value = self.scalars[s.0].value * self.scalars[s.0].value;
        self.push_scalar("square", ScalarOp::Square { s }, value)
    }

    /// Mean of the given scalars (masked mean: callers include only valid
    /// positions).
    pub fn mean(&mut self, terms: &[ScalarId]) -> Result<ScalarId, DiffError> {
        if terms.is_empty() {
            return self.const_scalar(0.0);
        }
        let w = 1.0 / terms.len() as f64;
        let weighted: Vec<(f64, ScalarId)> = terms.iter().map(|&s| (w, s)).collect();
        self.lin(&weighted, 0.0)
    }

    fn run_backward(&self, root: ScalarId) -> Result<GradVector, DiffError> {
        let mut scalar_adj = vec![0.0; self.scalars.len()];
        let mut vec_adj: Vec<Vec<f64>> =
            self.vecs.iter().map(|n| vec![0.0; n.value.len()]).collect();
        let mut grad = self.params.zeros_like();
        scalar_adj[root.0] = 1.0;

        for i in (0..self.scalars.len()).rev() {
            let adj = scalar_adj[i];
            if adj == 0.0 {
                continue;
            }
            match &self.scalars[i].op {
                ScalarOp::Const => {}
                ScalarOp::Pick { v, index } => {
                    vec_adj[v.0][*index] += adj;
                }
                ScalarOp::LogSumExp { v } => {
                    let probs = softmax(&self.vecs[v.0].value);
                    for (slot, p) in vec_adj[v.0].iter_mut().zip(probs.iter()) {
                        *slot += adj * p;
                    }
                }
                ScalarOp::Lin { terms } => {
                    for &(c, s) in terms {
                        scalar_adj[s.0] += adj * c;
                    }
                }
                ScalarOp::Square { s } => {
                    scalar_adj[s.0] += adj * 2.0 * self.scalars[s.0].value;
                }
            }
        }

        for i in (0..self.vecs.len()).rev() {
            if vec_adj[i].iter().all(|&v| v == 0.0) {
                continue;
            }
            // Split borrows: take the adjoint out, put it back if unused.
            let adj = std::mem::take(&mut vec_adj[i]);
            match &self.vecs[i].op {
                VecOp::Const => {}
                VecOp::Param { param } => {
                    let g = &mut grad.tensors[*param].data;
                    for (slot, a) in g.iter_mut().zip(adj.iter()) {
                        *slot += a;
                    }
                }
                VecOp::EmbedRow { param, row } => {
                    let cols = adj.len();
                    let g = &mut grad.tensors[*param].data[row * cols..(row + 1) * cols];
                    for (slot, a) in g.iter_mut().zip(adj.iter()) {
                        *slot += a;
                    }
                }
                VecOp::MatVec { param, x } => {
                    let t = &self.params.tensors[*param];
                    let (rows, cols) = match t.shape {
                        Shape::Matrix(r, c) => (r, c),
                        _ => unreachable!("matvec references a matrix"),
                    };
                    let xv = &self.vecs[x.0].value;
                    let gw = &mut grad.tensors[*param].data;
                    for r in 0..rows {
                        let a = adj[r];
                        if a == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            gw[r * cols + c] += a * xv[c];
                        }
                    }
                    let gx = &mut vec_adj[x.0];
                    for (c, slot) in gx.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (r, &a) in adj.iter().enumerate() {
                            acc += a * t.data[r * cols + c];
                        }
                        *slot += acc;
                    }
                }
                VecOp::Add { a, b } => {
                    for (slot, v) in vec_adj[a.0].iter_mut().zip(adj.iter()) {
                        *slot += v;
                    }
                    for (slot, v) in vec_adj[b.0].iter_mut().zip(adj.iter()) {
                        *slot += v;
                    }
                }
                VecOp::Tanh { a } => {
                    let out = &self.vecs[i].value;
                    for ((slot, v), y) in vec_adj[a.0].iter_mut().zip(adj.iter()).zip(out.iter()) {
                        *slot += v * (1.0 - y * y);
                    }
                }
                VecOp::Exp { a } => {
                    let out = &self.vecs[i].value;
                    for ((slot, v), y) in vec_adj[a.0].iter_mut().zip(adj.iter()).zip(out.iter()) {
                        *slot += v * y;
                    }
                }
                VecOp::Log { a } => {
                    let input = &self.vecs[a.0].value;
                    for ((slot, v), x) in vec_adj[a.0].iter_mut().zip(adj.iter()).zip(input.iter())
                    {
                        *slot += v / x;
                    }
                }
                VecOp::Softmax { a } => {
                    let y = &self.vecs[i].value;
                    let dot: f64 = y.iter().zip(adj.iter()).map(|(p, d)| p * d).sum();
                    for ((slot, d), p) in vec_adj[a.0].iter_mut().zip(adj.iter()).zip(y.iter()) {
                        *slot += p * (d - dot);
                    }
                }
                VecOp::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.vecs[p.0].value.len();
                        for (slot, v) in vec_adj[p.0]
                            .iter_mut()
                            .zip(adj[offset..offset + len].iter())
                        {
                            *slot += v;
                        }
                        offset += len;
                    }
                }
            }
        }

        for t in &grad.tensors {
            check_finite_slice("gradient", &t.data)?;
        }
        Ok(GradVector(grad))
    }
}

/// Builds the loss on a fresh tape and returns its value with the exact
/// analytic gradient at `params`.
pub fn backward<F>(params: &ParamVector, build: F) -> Result<(f64, GradVector), DiffError>
where
    F: FnOnce(&mut Tape) -> Result<ScalarId, DiffError>,
{
    let mut tape = Tape::new(params);
    let root = build(&mut tape)?;
    let value = tape.value(root);
    let grad = tape.run_backward(root)?;
    Ok((value, grad))
}

/// Forward-only evaluation of a loss builder.
pub fn eval_scalar<F>(params: &ParamVector, build: F) -> Result<f64, DiffError>
where
    F: FnOnce(&mut Tape) -> Result<ScalarId, DiffError>,
{
    let mut tape = Tape::new(params);
    let root = build(&mut tape)?;
    Ok(tape.value(root))
}

/// Compares analytic gradients against central finite differences on
/// `n_probes` seeded random coordinates; returns the maximum of
/// |analytic − numeric| / max(1, |numeric|).
pub fn finite_diff_check<F>(
    params: &ParamVector,
    build: F,
    n_probes: usize,
    step: f64,
    seed: u64,
) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape) -> Result<ScalarId, DiffError>,
{
    if n_probes == 0 {
        return Err(DiffError::NoProbes);
    }
    if !(step > 0.0) {
        return Err(DiffError::BadStep(step));
    }
    let (_, grad) = backward(params, &build)?;
    let total = params.total_count();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let coords: Vec<usize> = if n_probes >= total {
        (0..total).collect()
    } else {
        rand::seq::index::sample(&mut rng, total, n_probes).into_vec()
    };

    let mut max_rel = 0.0f64;
    for &i in &coords {
        let base = params.get_flat(i);
        let mut plus = params.clone();
        plus.set_flat(i, base + step);
        let mut minus = params.clone();
        minus.set_flat(i, base - step);
        let f_plus = eval_scalar(&plus, &build)?;
        let f_minus = eval_scalar(&minus, &build)?;
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let rel = (grad.get_flat(i) - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
