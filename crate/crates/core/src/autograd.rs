//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients for every node whose subtree touches a leaf that requires them.
//! Parameter leaves are keyed by their stable name so the resulting
//! gradients can be mapped straight back onto a [`ParamStore`].
//!
//! [`ParamStore`]: crate::models::ParamStore

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::models::ParamStore;

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Abs(Var),
    RmsNorm(Var),
    CausalSoftmax(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    KlSoftmax {
        real: Var,
        est: Var,
        temperature: f64,
        // cached per-row probabilities: (p, q, kl)
        cache: Box<(Mat, Mat, Vec<f64>)>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

const RMS_EPS: f64 = 1e-6;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Which parameters get gradients.
#[derive(Clone, Debug, Default)]
pub enum GradScope {
    /// every parameter leaf requires a gradient
    #[default]
    All,
    /// only the named parameters
    Only(BTreeSet<String>),
    /// forward-only evaluation
    None,
}

impl GradScope {
    fn wants(&self, name: &str) -> bool {
        match self {
            GradScope::All => true,
            GradScope::Only(set) => set.contains(name),
            GradScope::None => false,
        }
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    scope: GradScope,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    per_node: Vec<Option<Mat>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.per_node[v.0].as_ref()
    }

    /// Gradients of every parameter leaf that required one, keyed by name.
    pub fn into_param_grads(mut self) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.params) {
            if let Some(g) = self.per_node[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(GradScope::All)
    }
}

impl Graph {
    pub fn new(scope: GradScope) -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            params: HashMap::new(),
            scope,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient (used by gradient checks on activations).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?
            .clone();
        let needs = self.scope.wants(name);
        let v = self.push(value, Op::Leaf, needs);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row` of shape `(1, n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| {
            let u = GELU_K * (x + GELU_C * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    /// Row-wise RMS normalization without gain.
    pub fn rms_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
            let r = (ms + RMS_EPS).sqrt();
            row.mapv_inplace(|x| x / r);
        }
        let ng = self.ng(a);
        self.push(v, Op::RmsNorm(a), ng)
    }

    /// Row-wise softmax where row `i` only sees columns `j <= i`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        let mut v = Mat::zeros((n, m));
        for i in 0..n {
            let lim = (i + 1).min(m);
            let row = x.slice(s![i, ..lim]);
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..lim {
                let e = (x[[i, j]] - mx).exp();
                v[[i, j]] = e;
                z += e;
            }
            for j in 0..lim {
                v[[i, j]] /= z;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::CausalSoftmax(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("concat_rows: {e}")))?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("concat_cols: {e}")))?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let rows = t.nrows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("gather index {bad} out of {rows} rows")));
        }
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        let ng = self.ng(table);
        Ok(self.push(v, Op::Gather(table, ids.to_vec()), ng))
    }

    /// Mean over all elements, as a `(1, 1)` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a).mean().unwrap_or(0.0);
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), v), Op::Mean(a), ng)
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_of(&mut self, scalars: &[Var]) -> Result<Var> {
        let stacked = self.concat_rows(scalars)?;
        Ok(self.mean(stacked))
    }

    /// Mean next-token cross-entropy over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let l = self.value(logits);
        let (n, vocab) = l.dim();
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {n} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&t) = targets
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
            .find(|&&t| t >= vocab)
        {
            return Err(Error::Shape(format!("target id {t} outside vocabulary of {vocab}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoSupervisedPositions);
        }
        let mut total = 0.0;
        for i in (0..n).filter(|&i| mask[i]) {
            let row = l.row(i);
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let v = total / count as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Mat::from_elem((1, 1), v),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over rows of `KL(softmax(real/τ) ‖ softmax(est/τ))`.
    pub fn kl_softmax(&mut self, real: Var, est: Var, temperature: f64) -> Result<Var> {
        let a = self.value(real);
        let b = self.value(est);
        if a.dim() != b.dim() {
            return Err(Error::Shape(format!(
                "kl: real {:?} vs estimated {:?}",
                a.dim(),
                b.dim()
            )));
        }
        let p = softmax_rows(a, temperature);
        let q = softmax_rows(b, temperature);
        let mut kls = Vec::with_capacity(p.nrows());
        for (pr, qr) in p.rows().into_iter().zip(q.rows()) {
            let mut kl = 0.0;
            for (&pi, &qi) in pr.iter().zip(qr.iter()) {
                if pi > 0.0 {
                    kl += pi * (pi.ln() - qi.ln());
                }
            }
            kls.push(kl.max(0.0));
        }
        let v = kls.iter().sum::<f64>() / kls.len().max(1) as f64;
        let ng = self.ng(real) || self.ng(est);
        Ok(self.push(
            Mat::from_elem((1, 1), v),
            Op::KlSoftmax {
                real,
                est,
                temperature,
                cache: Box::new((p, q, kls)),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones(self.nodes[root.0].value.dim()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        Gradients {
            per_node: grads,
            params,
        }
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if ng(*b) {
                    accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.dot(val(*b)));
                }
                if ng(*b) {
                    accumulate(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g * val(*b));
                }
                if ng(*b) {
                    accumulate(grads, *b, g * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                if ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(*row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if ng(*a) {
                    accumulate(grads, *a, g * val(*row));
                }
                if ng(*row) {
                    let prod = g * val(*a);
                    accumulate(grads, *row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::Gelu(a) => {
                let mut d = val(*a).clone();
                d.zip_mut_with(g, |x, &gy| {
                    let x0 = *x;
                    let u = GELU_K * (x0 + GELU_C * x0 * x0 * x0);
                    let t = u.tanh();
                    let du = GELU_K * (1.0 + 3.0 * GELU_C * x0 * x0);
                    *x = gy * (0.5 * (1.0 + t) + 0.5 * x0 * (1.0 - t * t) * du);
                });
                accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let mut d = val(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                d *= g;
                accumulate(grads, *a, d);
            }
            Op::RmsNorm(a) => {
                let x = val(*a);
                let mut d = Mat::zeros(x.dim());
                let n = x.ncols() as f64;
                for i in 0..x.nrows() {
                    let xr = x.row(i);
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / n;
                    let r = (ms + RMS_EPS).sqrt();
                    let yr = out.row(i);
                    let gr = g.row(i);
                    let dot = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum::<f64>() / n;
                    for j in 0..x.ncols() {
                        d[[i, j]] = (gr[j] - yr[j] * dot) / r;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::CausalSoftmax(a) => {
                let mut d = Mat::zeros(out.dim());
                for i in 0..out.nrows() {
                    let yr = out.row(i);
                    let gr = g.row(i);
                    let dot = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum::<f64>();
                    for j in 0..out.ncols() {
                        d[[i, j]] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).nrows();
                    if ng(p) {
                        accumulate(grads, p, g.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = val(p).ncols();
                    if ng(p) {
                        accumulate(grads, p, g.slice(s![.., start..start + cols]).to_owned());
                    }
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(val(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(val(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *a, d);
            }
            Op::Gather(table, ids) => {
                let mut d = Mat::zeros(val(*table).dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &g.row(i);
                }
                accumulate(grads, *table, d);
            }
            Op::Mean(a) => {
                let x = val(*a);
                let c = g[[0, 0]] / x.len().max(1) as f64;
                accumulate(grads, *a, Mat::from_elem(x.dim(), c));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let l = val(*logits);
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g[[0, 0]] / count;
                let mut d = Mat::zeros(l.dim());
                for i in (0..l.nrows()).filter(|&i| mask[i]) {
                    let row = l.row(i);
                    let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                    for j in 0..l.ncols() {
                        d[[i, j]] = (row[j] - mx).exp() / z * scale;
                    }
                    d[[i, targets[i]]] -= scale;
                }
                accumulate(grads, *logits, d);
            }
            Op::KlSoftmax {
                real,
                est,
                temperature,
                cache,
            } => {
                let (p, q, kls) = cache.as_ref();
                let rows = p.nrows() as f64;
                let c = g[[0, 0]] / (rows * temperature);
                if ng(*real) {
                    let mut d = Mat::zeros(p.dim());
                    for i in 0..p.nrows() {
                        for j in 0..p.ncols() {
                            let pi = p[[i, j]];
                            if pi > 0.0 {
                                d[[i, j]] = c * pi * (pi.ln() - q[[i, j]].ln() - kls[i]);
                            }
                        }
                    }
                    accumulate(grads, *real, d);
                }
                if ng(*est) {
                    accumulate(grads, *est, (q - p) * c);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise softmax of `x / temperature`.
pub fn softmax_rows(x: &Mat, temperature: f64) -> Mat {
    let mut out = x / temperature;
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}
