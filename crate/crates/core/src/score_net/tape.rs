//! Reverse-mode differentiation over batched matrices.
//!
//! A [`Graph`] records every operation of a loss closure against one
//! parameter vector. Values are dense row-major matrices (rows = batch).
//! Only the parameter vector receives gradients; everything built through
//! [`Graph::constant`] is data. Misuse (a [`Var`] from another graph, shape
//! mismatches) is recorded and reported when the gradient is requested, which
//! keeps the op methods infallible inside closures.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{LayerSpec, ScoreModelParams};
use crate::error::{Error, Result};
use crate::losses::ell::{EllKind, GUARD_BOUND};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix { rows: rows.len(), cols, data }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Matrix { rows: values.len(), cols: 1, data: values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Pairwise summation; fixed association order for a given length.
pub fn tree_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (a, b) = values.split_at(n / 2);
            tree_sum(a) + tree_sum(b)
        }
    }
}

pub(crate) fn linear_forward(params: &[f64], layer: &LayerSpec, input: &Matrix) -> Matrix {
    debug_assert_eq!(input.cols, layer.input);
    let w = &params[layer.offset..layer.bias_offset()];
    let b = &params[layer.bias_offset()..layer.bias_offset() + layer.output];
    let mut out = Vec::with_capacity(input.rows * layer.output);
    for r in 0..input.rows {
        let x = input.row(r);
        for o in 0..layer.output {
            let wr = &w[o * layer.input..(o + 1) * layer.input];
            let mut acc = 0.0;
            for (wi, xi) in wr.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc + b[o]);
        }
    }
    Matrix::new(input.rows, layer.output, out)
}

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Params,
    Linear { input: usize, layer: LayerSpec },
    Activation { input: usize },
    Clamp { input: usize, bound: f64 },
    Add(usize, usize),
    Sub(usize, usize),
    Scale { input: usize, factor: f64 },
    RowScale { input: usize, factors: Vec<f64> },
    RowSqNorm { input: usize },
    SegmentSum { input: usize, group: usize },
    Ell { input: usize, kind: EllKind },
    Mean { input: usize },
    Sum { input: usize },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Counters collected while a graph is built.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GraphStats {
    /// Outer-loss arguments with magnitude above [`GUARD_BOUND`].
    pub guard_events: usize,
}

/// Operation recorder for one loss evaluation.
pub struct Graph<'p> {
    id: u64,
    params: &'p ScoreModelParams,
    nodes: Vec<Node>,
    error: Option<String>,
    stats: GraphStats,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ScoreModelParams) -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
            error: None,
            stats: GraphStats::default(),
        }
    }

    pub fn params(&self) -> &'p ScoreModelParams {
        self.params
    }

    pub fn stats(&self) -> GraphStats {
        self.stats
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.resolve(v).unwrap_or(0)].value
    }

    fn fail(&mut self, msg: String) -> Var {
        if self.error.is_none() {
            self.error = Some(msg);
        }
        self.push(Matrix::zeros(1, 1), Op::Constant, false)
    }

    fn resolve(&self, v: Var) -> Option<usize> {
        (v.graph == self.id && v.index < self.nodes.len()).then_some(v.index)
    }

    fn input(&mut self, v: Var) -> Option<usize> {
        let r = self.resolve(v);
        if r.is_none() && self.error.is_none() {
            self.error = Some("variable belongs to a different graph".into());
        }
        r
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn tracked(&self, i: usize) -> bool {
        self.nodes[i].tracked
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, false)
    }

    /// The whole parameter vector as a `1 x P` variable.
    pub fn parameters(&mut self) -> Var {
        let m = Matrix::new(1, self.params.len(), self.params.flat().to_vec());
        self.push(m, Op::Params, true)
    }

    /// Clamped network output for prepared inputs (see `build_inputs`).
    pub fn score(&mut self, inputs: Matrix) -> Var {
        let arch = self.params.arch();
        if inputs.cols != arch.input_dim() {
            return self.fail(format!(
                "score input has {} columns, network expects {}",
                inputs.cols,
                arch.input_dim()
            ));
        }
        let layers = arch.layers();
        let clamp = arch.output_clamp;
        let mut h = self.constant(inputs);
        for (i, layer) in layers.iter().enumerate() {
            h = self.linear(h, *layer);
            if i + 1 < layers.len() {
                h = self.activation(h);
            }
        }
        self.clamp(h, clamp)
    }

    fn linear(&mut self, x: Var, layer: LayerSpec) -> Var {
        let Some(i) = self.input(x) else { return self.fail("linear".into()) };
        let value = linear_forward(self.params.flat(), &layer, &self.nodes[i].value);
        self.push(value, Op::Linear { input: i, layer }, true)
    }

    fn activation(&mut self, x: Var) -> Var {
        let Some(i) = self.input(x) else { return self.fail("activation".into()) };
        let act = self.params.arch().activation;
        let mut value = self.nodes[i].value.clone();
        value.map_inplace(|v| act.apply(v));
        let tracked = self.tracked(i);
        self.push(value, Op::Activation { input: i }, tracked)
    }

    pub fn clamp(&mut self, x: Var, bound: f64) -> Var {
        let Some(i) = self.input(x) else { return self.fail("clamp".into()) };
        let mut value = self.nodes[i].value.clone();
        value.map_inplace(|v| v.clamp(-bound, bound));
        let tracked = self.tracked(i);
        self.push(value, Op::Clamp { input: i, bound }, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, sub: bool) -> Var {
        let (Some(i), Some(j)) = (self.input(a), self.input(b)) else {
            return self.fail("binary op".into());
        };
        let (va, vb) = (&self.nodes[i].value, &self.nodes[j].value);
        if !va.same_shape(vb) {
            let msg = format!("shape mismatch {}x{} vs {}x{}", va.rows, va.cols, vb.rows, vb.cols);
            return self.fail(msg);
        }
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(x, y)| if sub { x - y } else { x + y })
            .collect();
        let value = Matrix::new(va.rows, va.cols, data);
        let tracked = self.tracked(i) || self.tracked(j);
        let op = if sub { Op::Sub(i, j) } else { Op::Add(i, j) };
        self.push(value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let Some(i) = self.input(x) else { return self.fail("scale".into()) };
        let mut value = self.nodes[i].value.clone();
        value.map_inplace(|v| v * factor);
        let tracked = self.tracked(i);
        self.push(value, Op::Scale { input: i, factor }, tracked)
    }

    /// Multiplies row `r` by `factors[r]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let Some(i) = self.input(x) else { return self.fail("row_scale".into()) };
        let src = &self.nodes[i].value;
        if factors.len() != src.rows {
            let msg = format!("{} row factors for {} rows", factors.len(), src.rows);
            return self.fail(msg);
        }
        let mut value = src.clone();
        for (r, f) in factors.iter().enumerate() {
            for v in &mut value.data[r * src.cols..(r + 1) * src.cols] {
                *v *= f;
            }
        }
        let tracked = self.tracked(i);
        self.push(value, Op::RowScale { input: i, factors }, tracked)
    }

    /// Squared Euclidean norm of each row, as a column.
    pub fn row_sq_norm(&mut self, x: Var) -> Var {
        let Some(i) = self.input(x) else { return self.fail("row_sq_norm".into()) };
        let src = &self.nodes[i].value;
        let data = (0..src.rows).map(|r| src.row(r).iter().map(|v| v * v).sum()).collect();
        let tracked = self.tracked(i);
        self.push(Matrix::column(data), Op::RowSqNorm { input: i }, tracked)
    }

    /// Sums consecutive groups of `group` rows of a column.
    pub fn segment_sum(&mut self, x: Var, group: usize) -> Var {
        let Some(i) = self.input(x) else { return self.fail("segment_sum".into()) };
        let src = &self.nodes[i].value;
        if src.cols != 1 || group == 0 || !src.rows.is_multiple_of(group) {
            let msg = format!("cannot group {}x{} into segments of {group}", src.rows, src.cols);
            return self.fail(msg);
        }
        let data = src.data.chunks(group).map(tree_sum).collect();
        let tracked = self.tracked(i);
        self.push(Matrix::column(data), Op::SegmentSum { input: i, group }, tracked)
    }

    /// Elementwise outer loss.
    pub fn ell(&mut self, x: Var, kind: EllKind) -> Var {
        let Some(i) = self.input(x) else { return self.fail("ell".into()) };
        let mut value = self.nodes[i].value.clone();
        self.stats.guard_events += value.data.iter().filter(|u| u.abs() > GUARD_BOUND).count();
        value.map_inplace(|u| kind.value(u));
        let tracked = self.tracked(i);
        self.push(value, Op::Ell { input: i, kind }, tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let Some(i) = self.input(x) else { return self.fail("mean".into()) };
        let src = &self.nodes[i].value;
        let n = src.data.len().max(1) as f64;
        let value = Matrix::new(1, 1, vec![tree_sum(&src.data) / n]);
        let tracked = self.tracked(i);
        self.push(value, Op::Mean { input: i }, tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let Some(i) = self.input(x) else { return self.fail("sum".into()) };
        let value = Matrix::new(1, 1, vec![tree_sum(&self.nodes[i].value.data)]);
        let tracked = self.tracked(i);
        self.push(value, Op::Sum { input: i }, tracked)
    }

    fn scalar_output(&self, out: Var) -> Result<usize> {
        if let Some(e) = &self.error {
            return Err(Error::Grad(e.clone()));
        }
        let i = self
            .resolve(out)
            .ok_or_else(|| Error::Grad("loss variable belongs to a different graph".into()))?;
        let v = &self.nodes[i].value;
        if v.rows != 1 || v.cols != 1 {
            return Err(Error::Grad(format!("loss must be a scalar, got {}x{}", v.rows, v.cols)));
        }
        if !v.data[0].is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        Ok(i)
    }

    /// Value of a scalar output.
    pub fn scalar(&self, out: Var) -> Result<f64> {
        let i = self.scalar_output(out)?;
        Ok(self.nodes[i].value.data[0])
    }

    /// Gradient of a scalar output with respect to the parameter vector.
    pub fn backward(&self, out: Var) -> Result<Vec<f64>> {
        let root = self.scalar_output(out)?;
        let params = self.params.flat();
        let mut grad = vec![0.0; params.len()];
        let mut adj: Vec<Option<Matrix>> = (0..=root).map(|_| None).collect();
        adj[root] = Some(Matrix::new(1, 1, vec![1.0]));

        for idx in (0..=root).rev() {
            let Some(a) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Params => {
                    for (g, v) in grad.iter_mut().zip(&a.data) {
                        *g += v;
                    }
                }
                Op::Linear { input, layer } => {
                    let x = &self.nodes[*input].value;
                    let w = &params[layer.offset..layer.bias_offset()];
                    let need_input = self.tracked(*input);
                    let mut dx = need_input.then(|| Matrix::zeros(x.rows, x.cols));
                    let (gw, rest) = grad[layer.offset..].split_at_mut(layer.input * layer.output);
                    let gb = &mut rest[..layer.output];
                    for r in 0..x.rows {
                        let xr = x.row(r);
                        for o in 0..layer.output {
                            let g = a.data[r * layer.output + o];
                            if g == 0.0 {
                                continue;
                            }
                            gb[o] += g;
                            let gwr = &mut gw[o * layer.input..(o + 1) * layer.input];
                            for (gwi, xi) in gwr.iter_mut().zip(xr) {
                                *gwi += g * xi;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let wr = &w[o * layer.input..(o + 1) * layer.input];
                                let dxr = &mut dx.data[r * layer.input..(r + 1) * layer.input];
                                for (d, wi) in dxr.iter_mut().zip(wr) {
                                    *d += g * wi;
                                }
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut adj, *input, dx);
                    }
                }
                Op::Activation { input } => {
                    let act = self.params.arch().activation;
                    let x = &self.nodes[*input].value;
                    let data = a.data.iter().zip(&x.data).map(|(g, v)| g * act.derivative(*v)).collect();
                    accumulate(&mut adj, *input, Matrix::new(x.rows, x.cols, data));
                }
                Op::Clamp { input, bound } => {
                    let x = &self.nodes[*input].value;
                    let data = a
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, v)| if v.abs() < *bound { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *input, Matrix::new(x.rows, x.cols, data));
                }
                Op::Add(i, j) => {
                    if self.tracked(*j) {
                        accumulate(&mut adj, *j, a.clone());
                    }
                    accumulate(&mut adj, *i, a);
                }
                Op::Sub(i, j) => {
                    if self.tracked(*j) {
                        let mut neg = a.clone();
                        neg.map_inplace(|v| -v);
                        accumulate(&mut adj, *j, neg);
                    }
                    accumulate(&mut adj, *i, a);
                }
                Op::Scale { input, factor } => {
                    let mut g = a;
                    g.map_inplace(|v| v * factor);
                    accumulate(&mut adj, *input, g);
                }
                Op::RowScale { input, factors } => {
                    let mut g = a;
                    let cols = g.cols;
                    for (r, f) in factors.iter().enumerate() {
                        for v in &mut g.data[r * cols..(r + 1) * cols] {
                            *v *= f;
                        }
                    }
                    accumulate(&mut adj, *input, g);
                }
                Op::RowSqNorm { input } => {
                    let x = &self.nodes[*input].value;
                    let mut g = x.clone();
                    for r in 0..x.rows {
                        let s = 2.0 * a.data[r];
                        for v in &mut g.data[r * x.cols..(r + 1) * x.cols] {
                            *v *= s;
                        }
                    }
                    accumulate(&mut adj, *input, g);
                }
                Op::SegmentSum { input, group } => {
                    let data = a.data.iter().flat_map(|g| std::iter::repeat_n(*g, *group)).collect();
                    accumulate(&mut adj, *input, Matrix::column(data));
                }
                Op::Ell { input, kind } => {
                    let x = &self.nodes[*input].value;
                    let data = a.data.iter().zip(&x.data).map(|(g, u)| g * kind.derivative(*u)).collect();
                    accumulate(&mut adj, *input, Matrix::new(x.rows, x.cols, data));
                }
                Op::Mean { input } | Op::Sum { input } => {
                    let x = &self.nodes[*input].value;
                    let scale = match node.op {
                        Op::Mean { .. } => a.data[0] / x.data.len().max(1) as f64,
                        _ => a.data[0],
                    };
                    accumulate(&mut adj, *input, Matrix::new(x.rows, x.cols, vec![scale; x.data.len()]));
                }
            }
        }
        Ok(grad)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut adj[idx] {
        Some(existing) => {
            for (e, v) in existing.data.iter_mut().zip(&g.data) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Loss value and its exact gradient.
pub fn grad_loss<F>(params: &ScoreModelParams, loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let out = loss(&mut g)?;
    let value = g.scalar(out)?;
    Ok((value, g.backward(out)?))
}

/// Loss value only.
pub fn eval_loss<F>(params: &ScoreModelParams, loss: F) -> Result<f64>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let out = loss(&mut g)?;
    g.scalar(out)
}
