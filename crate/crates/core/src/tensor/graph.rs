use std::collections::HashMap;

use super::kernels::{self, axis_blocks, gemm, permute};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a[.., m, k] x b[k, n]`
    MatMul(Var, Var),
    /// `a[B.., m, k] x b[B.., k, n]`
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Repeat {
        x: Var,
        axis: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Cosine {
        a: Var,
        b: Var,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
    TimestepEmbed {
        tau: Var,
        freqs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// Recording tape for one forward/backward pass.
///
/// Repeated `backward` calls accumulate into leaf gradients until
/// [`Graph::reset_grads`] is called.
pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }
}

impl<'s> Graph<'s> {
    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph on which nothing requires grad; used for inference.
    pub fn inference(store: &'s ParamStore) -> Self {
        let mut g = Self::with_params(store);
        g.grad_enabled = false;
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- leaves ---------------------------------------------------------

    /// Records a leaf. Its `requires_grad` flag decides whether gradients are
    /// accumulated for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad && self.grad_enabled;
        self.push(t.shape, t.data, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, false, Op::Leaf)
    }

    /// Binds a stored parameter as a leaf (once per graph). Frozen parameters
    /// become constants.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| invalid("param", "graph has no parameter store"))?;
        let p = store.get(id)?;
        let requires_grad = !p.frozen && self.grad_enabled;
        let v = self.push(
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
            requires_grad,
            Op::Leaf,
        );
        self.bound.insert(id, v);
        Ok(v)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- accessors ------------------------------------------------------

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    /// Accumulated gradient of a leaf; zeros if nothing reached it.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let n = self.node(v);
        n.grad.clone().unwrap_or_else(|| vec![0.0; n.data.len()])
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.node(v).data.iter().all(|x| x.is_finite())
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.fill(0.0);
            }
        }
    }

    /// Gradients of every bound parameter that required grad.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .bound
            .iter()
            .filter(|(_, v)| self.node(**v).requires_grad)
            .map(|(id, v)| (*id, self.grad(*v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[.., m, k] x b[k, n] -> [.., m, n]`, or a batched product when `b`
    /// has rank ≥ 3 with the same leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch());
            }
            let n = sb[1];
            let rows = self.node(a).data.len() / k;
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, &self.node(a).data, false, &self.node(b).data, false, &mut out, false);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let rg = self.rg(&[a, b]);
            Ok(self.push(shape, out, rg, Op::MatMul(a, b)))
        } else {
            if sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || sb[sb.len() - 2] != k {
                return Err(mismatch());
            }
            let n = sb[sb.len() - 1];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut out = vec![0.0; batch * m * n];
            let (da, db) = (&self.node(a).data, &self.node(b).data);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let rg = self.rg(&[a, b]);
            Ok(self.push(shape, out, rg, Op::BatchMatMul(a, b)))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, tag: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, tag))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, tag: Op) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let d = *sa.last().unwrap();
        if sb.iter().product::<usize>() != d || sb.last() != Some(&d) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let row = &self.node(b).data;
        let out: Vec<f64> = self
            .node(a)
            .data
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(row).map(|(x, y)| f(*x, *y)))
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, tag))
    }

    /// Adds a vector along the trailing axis.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies by a vector along the trailing axis.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.node(a).data.iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.node(a).data.iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, rg, Op::AddScalar(a))
    }

    // ---- layout ---------------------------------------------------------

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(invalid("permute", format!("axes {axes:?} invalid for shape {shape:?}")));
        }
        let out = permute(&self.node(a).data, &shape, axes, false);
        let new_shape = axes.iter().map(|&x| shape[x]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(new_shape, out, rg, Op::Permute(a, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.node(a).data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.node(a).data.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut extent = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.node(*p);
                let len = n.shape[axis] * inner;
                out.extend_from_slice(&n.data[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(shape, out, rg, Op::Concat(parts.to_vec(), axis)))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(invalid("slice", format!("range {start}..{end} on axis {axis} of {shape:?}")));
        }
        let (outer, ext, inner) = axis_blocks(&shape, axis);
        let src = &self.node(a).data;
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(new_shape, out, rg, Op::Slice { x: a, axis, start }))
    }

    /// Tiles an axis of extent 1 to extent `n`.
    pub fn repeat(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] != 1 || n == 0 {
            return Err(invalid("repeat", format!("axis {axis} of {shape:?} must have extent 1")));
        }
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let src = &self.node(a).data;
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = n;
        let rg = self.rg(&[a]);
        Ok(self.push(new_shape, out, rg, Op::Repeat { x: a, axis }))
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(invalid("gather_rows", format!("table must be 2-D, got {shape:?}")));
        }
        if ids.is_empty() {
            return Err(invalid("gather_rows", "empty id list"));
        }
        let (v, d) = (shape[0], shape[1]);
        let src = &self.node(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(invalid("gather_rows", format!("id {i} out of range for vocabulary {v}")));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(vec![ids.len(), d], out, rg, Op::Gather { table, ids: ids.to_vec() }))
    }

    // ---- nonlinearities -------------------------------------------------

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = *self.shape(a).last().unwrap();
        let mut out = self.node(a).data.clone();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, rg, Op::Softmax(a))
    }

    /// Layer normalization over the trailing axis with optional learnable
    /// scale and shift (each of shape `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = &self.node(x).data;
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(gm) = gamma {
            let gd = &self.node(gm).data;
            for row in out.chunks_mut(d) {
                for (o, g) in row.iter_mut().zip(gd) {
                    *o *= g;
                }
            }
        }
        if let Some(bt) = beta {
            let bd = &self.node(bt).data;
            for row in out.chunks_mut(d) {
                for (o, b) in row.iter_mut().zip(bd) {
                    *o += b;
                }
            }
        }
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        Ok(self.push(shape, out, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.node(a).data.iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, rg, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.node(a).data.iter().map(|&v| v * kernels::sigmoid(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, rg, Op::Silu(a))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a).data.len() as f64;
        let s = self.node(a).data.iter().sum::<f64>() / n;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::Mean(a))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let s = da.iter().zip(db).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / da.len() as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![1], vec![s], rg, Op::Mse(a, b)))
    }

    /// Cosine similarity along the trailing axis; output drops that axis
    /// (a rank-1 input yields shape `[1]`).
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let rows = da.len() / d;
        let mut out = vec![0.0; rows];
        let mut na = vec![0.0; rows];
        let mut nb = vec![0.0; rows];
        for r in 0..rows {
            let (ra, rb) = (&da[r * d..(r + 1) * d], &db[r * d..(r + 1) * d]);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            na[r] = ra.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
            nb[r] = rb.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
            out[r] = dot / (na[r] * nb[r]);
        }
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out_shape, out, rg, Op::Cosine { a, b, na, nb }))
    }

    /// Sinusoidal embedding of timesteps `tau` (shape `[n]`) into `[n, dim]`:
    /// the first half holds cosines, the second half sines.
    pub fn timestep_embedding(&mut self, tau: Var, dim: usize) -> Result<Var> {
        let n = self.node(tau).data.len();
        if self.shape(tau).len() != 1 || dim < 2 || dim % 2 != 0 {
            return Err(invalid(
                "timestep_embedding",
                format!("need rank-1 input and even dim, got {:?} / {dim}", self.shape(tau)),
            ));
        }
        let half = dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|i| TIMESTEP_SCALE * (-(TIMESTEP_MAX_PERIOD.ln()) * i as f64 / half as f64).exp())
            .collect();
        let t = &self.node(tau).data;
        let mut out = vec![0.0; n * dim];
        for r in 0..n {
            for (i, f) in freqs.iter().enumerate() {
                out[r * dim + i] = (t[r] * f).cos();
                out[r * dim + half + i] = (t[r] * f).sin();
            }
        }
        let rg = self.rg(&[tau]);
        Ok(self.push(vec![n, dim], out, rg, Op::TimestepEmbed { tau, freqs }))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let acc = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; gout.len()]);
                for (a, b) in acc.iter_mut().zip(&gout) {
                    *a += b;
                }
                continue;
            }
            self.vjp(i, &gout, &mut grads);
        }
        Ok(())
    }

    fn vjp(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // accumulate into input `v` if it participates in differentiation
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].data.len();
                let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                let k = *na.shape.last().unwrap();
                let n = nb.shape[1];
                let rows = na.data.len() / k;
                acc(*a, &mut |g| gemm(rows, n, k, gout, false, &nb.data, true, g, true));
                acc(*b, &mut |g| gemm(k, rows, n, &na.data, true, gout, false, g, true));
            }
            Op::BatchMatMul(a, b) => {
                let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                let r = na.shape.len();
                let (m, k, n) = (na.shape[r - 2], na.shape[r - 1], nb.shape[r - 1]);
                let batch = na.data.len() / (m * k);
                acc(*a, &mut |g| {
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gout[bi * m * n..(bi + 1) * m * n],
                            false,
                            &nb.data[bi * k * n..(bi + 1) * k * n],
                            true,
                            &mut g[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &na.data[bi * m * k..(bi + 1) * m * k],
                            true,
                            &gout[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut g[bi * k * n..(bi + 1) * k * n],
                            true,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| {
                    for (x, y) in g.iter_mut().zip(gout) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(*a, &mut |g| {
                    for ((x, y), o) in g.iter_mut().zip(db).zip(gout) {
                        *x += y * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((x, y), o) in g.iter_mut().zip(da).zip(gout) {
                        *x += y * o;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let d = nodes[b.0].data.len();
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| {
                    for row in gout.chunks(d) {
                        add_into(g, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let row = &nodes[b.0].data;
                let d = row.len();
                let da = &nodes[a.0].data;
                acc(*a, &mut |g| {
                    for (gr, orow) in g.chunks_mut(d).zip(gout.chunks(d)) {
                        for ((x, o), r) in gr.iter_mut().zip(orow).zip(row) {
                            *x += o * r;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for (arow, orow) in da.chunks(d).zip(gout.chunks(d)) {
                        for ((x, o), av) in g.iter_mut().zip(orow).zip(arow) {
                            *x += o * av;
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| {
                for (x, o) in g.iter_mut().zip(gout) {
                    *x += c * o;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |g| add_into(g, gout)),
            Op::Permute(a, axes) => {
                let back = permute(gout, &nodes[a.0].shape, axes, true);
                acc(*a, &mut |g| add_into(g, &back));
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_blocks(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].shape[*axis] * inner;
                    acc(*p, &mut |g| {
                        for o in 0..outer {
                            add_into(&mut g[o * len..(o + 1) * len], &gout[o * total + offset..o * total + offset + len]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = &nodes[x.0].shape;
                let (outer, ext, inner) = axis_blocks(src_shape, *axis);
                let len = node.shape[*axis] * inner;
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        add_into(&mut g[base..base + len], &gout[o * len..(o + 1) * len]);
                    }
                });
            }
            Op::Repeat { x, axis } => {
                let (outer, n, inner) = axis_blocks(&node.shape, *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for r in 0..n {
                            let src = &gout[(o * n + r) * inner..(o * n + r + 1) * inner];
                            add_into(&mut g[o * inner..(o + 1) * inner], src);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].shape[1];
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Softmax(a) => {
                let d = *node.shape.last().unwrap();
                let y = &node.data;
                acc(*a, &mut |g| {
                    for ((gr, yr), orow) in g.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                        let dot: f64 = yr.iter().zip(orow).map(|(p, q)| p * q).sum();
                        for ((x, yv), o) in gr.iter_mut().zip(yr).zip(orow) {
                            *x += yv * (o - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let gvals = gamma.map(|gm| &nodes[gm.0].data);
                if let Some(bt) = beta {
                    acc(*bt, &mut |g| {
                        for row in gout.chunks(d) {
                            add_into(g, row);
                        }
                    });
                }
                if let Some(gm) = gamma {
                    acc(*gm, &mut |g| {
                        for (orow, hrow) in gout.chunks(d).zip(xhat.chunks(d)) {
                            for ((x, o), h) in g.iter_mut().zip(orow).zip(hrow) {
                                *x += o * h;
                            }
                        }
                    });
                }
                acc(*x, &mut |g| {
                    let mut dh = vec![0.0; d];
                    for (r, ((gr, orow), hrow)) in g.chunks_mut(d).zip(gout.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = orow[j] * gvals.map_or(1.0, |gv| gv[j]);
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gr[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let da = &nodes[a.0].data;
                acc(*a, &mut |g| {
                    for ((x, v), o) in g.iter_mut().zip(da).zip(gout) {
                        *x += o * kernels::gelu_grad(*v);
                    }
                });
            }
            Op::Silu(a) => {
                let da = &nodes[a.0].data;
                acc(*a, &mut |g| {
                    for ((x, v), o) in g.iter_mut().zip(da).zip(gout) {
                        let s = kernels::sigmoid(*v);
                        *x += o * (s + v * s * (1.0 - s));
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| {
                for x in g.iter_mut() {
                    *x += gout[0];
                }
            }),
            Op::Mean(a) => {
                let n = nodes[a.0].data.len() as f64;
                acc(*a, &mut |g| {
                    for x in g.iter_mut() {
                        *x += gout[0] / n;
                    }
                });
            }
            Op::Mse(a, b) => {
                let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                let c = 2.0 * gout[0] / da.len() as f64;
                acc(*a, &mut |g| {
                    for ((x, p), q) in g.iter_mut().zip(da).zip(db) {
                        *x += c * (p - q);
                    }
                });
                acc(*b, &mut |g| {
                    for ((x, p), q) in g.iter_mut().zip(da).zip(db) {
                        *x -= c * (p - q);
                    }
                });
            }
            Op::Cosine { a, b, na, nb } => {
                let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                let d = da.len() / na.len();
                let cos = &node.data;
                // d cos / d a = b / (|a||b|) - cos * a / |a|^2, with |a| clamped
                // at COS_EPS (the clamp branch has no norm-dependent term)
                let grad_of = |g: &mut [f64], this: &[f64], other: &[f64], nt: &[f64], no: &[f64]| {
                    for r in 0..nt.len() {
                        let clamped = nt[r] <= COS_EPS;
                        for j in 0..d {
                            let idx = r * d + j;
                            let mut v = other[idx] / (nt[r] * no[r]);
                            if !clamped {
                                v -= cos[r] * this[idx] / (nt[r] * nt[r]);
                            }
                            g[idx] += gout[r] * v;
                        }
                    }
                };
                acc(*a, &mut |g| grad_of(g, da, db, na, nb));
                acc(*b, &mut |g| grad_of(g, db, da, nb, na));
            }
            Op::TimestepEmbed { tau, freqs } => {
                let t = &nodes[tau.0].data;
                let dim = freqs.len() * 2;
                let half = freqs.len();
                acc(*tau, &mut |g| {
                    for r in 0..t.len() {
                        let mut s = 0.0;
                        for (i, f) in freqs.iter().enumerate() {
                            s += -gout[r * dim + i] * f * (t[r] * f).sin();
                            s += gout[r * dim + half + i] * f * (t[r] * f).cos();
                        }
                        g[r] += s;
                    }
                });
            }
        }
    }
}

const COS_EPS: f64 = 1e-12;
const TIMESTEP_SCALE: f64 = 100.0;
const TIMESTEP_MAX_PERIOD: f64 = 1000.0;

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(a);
        assert_eq!(g.data(s), &[0.5, 0.5]);
    }

    #[test]
    fn cosine_self_is_one() {
        let mut g = Graph::new();
        let v = g.constant(t(&[3], &[0.3, -2.0, 7.5]));
        let c = g.cosine_similarity(v, v).unwrap();
        assert!((g.item(c) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn square_sum_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[3.0]).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), vec![6.0]);
        // accumulate-until-reset
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), vec![12.0]);
        g.reset_grads();
        assert_eq!(g.grad(x), vec![0.0]);
    }

    #[test]
    fn softmax_sum_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[0.1, -1.0, 2.0, 0.5]).with_requires_grad(true));
        let s = g.softmax(x);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(x).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unreachable_leaf_grad_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let y = g.leaf(t(&[2], &[3.0, 4.0]).with_requires_grad(true));
        let yy = g.mul(y, y).unwrap();
        let _unused = g.scale(x, 2.0);
        let l = g.sum(yy);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), vec![0.0, 0.0]);
        assert_eq!(g.grad(y), vec![6.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros([3]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn non_finite_propagates() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[f64::NAN, 1.0]));
        let b = g.scale(a, 2.0);
        let s = g.sum(b);
        assert!(!g.is_finite(s));
    }

    #[test]
    fn layer_norm_statistics() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -5.0, 0.0, 0.5, 0.25]));
        let y = g.layer_norm(x, None, None, 1e-12).unwrap();
        for row in g.data(y).chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-7);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_matmul_matches_loops() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2, 1], &[1.0, 1.0, 2.0, -1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1, 1]);
        assert_eq!(g.data(c), &[3.0, 2.0]);
    }
}
