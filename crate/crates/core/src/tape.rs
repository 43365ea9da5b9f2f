//! Reverse-mode automatic differentiation over an eagerly recorded tape.
//!
//! Every operation computes its value immediately and appends a node to the
//! arena. Nodes only reference earlier nodes, so arena order is a topological
//! order and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    CausalMask(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    NeighborSum {
        x: Var,
        neighbors: Vec<Vec<usize>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Arena of recorded operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark` (a value of [`Tape::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.grads.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf. Gradients are tracked iff the tensor is
    /// flagged trainable.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape("constant", shape, &[value.len()]));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// The node recorded at position `index`; panics past the end.
    pub fn var_at(&self, index: usize) -> Var {
        assert!(index < self.nodes.len(), "tape position {index} out of range");
        Var(index)
    }

    /// Gradient accumulated by the most recent [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(r)
                .for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(vec![m, n], out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale(a, factor), rg)
    }

    /// Multiplies every entry of `a` by the single-entry tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.shape(a), self.shape(s)));
        }
        let f = self.value(s)[0];
        let out = self.value(a).iter().map(|x| x * f).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, s]);
        Ok(self.push(shape, out, Op::ScaleBy(a, s), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Gelu(a), rg)
    }

    /// Row-wise softmax with max subtraction. `-inf` entries map to 0.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a));
        let src = self.value(a);
        if src.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(Error::Numeric("softmax row has no finite maximum".into()));
            }
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - mx).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::SoftmaxRows(a), rg))
    }

    /// Sets entries above the diagonal of a square score matrix to `-inf`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "causal_mask")?;
        if m != n {
            return Err(Error::shape("causal_mask", &[m, n], &[m, m]));
        }
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for o in &mut out[i * n + i + 1..(i + 1) * n] {
                *o = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], out, Op::CausalMask(a), rg))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows of a table by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!("row index {id} out of range for {v} rows")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row `v` of the result is the sum of rows `neighbors[v]` of `x`.
    ///
    /// Each coordinate is summed in ascending value order, so the result is
    /// bitwise independent of how the neighbours are listed.
    pub fn neighbor_sum(&mut self, x: Var, neighbors: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = self.dims2(x, "neighbor_sum")?;
        if neighbors.len() != m || neighbors.iter().flatten().any(|&u| u >= m) {
            return Err(Error::Contract(format!("neighbour lists do not index {m} rows")));
        }
        let src = self.value(x);
        let mut out = vec![0.0; m * n];
        let mut buf = Vec::new();
        for (v, nb) in neighbors.iter().enumerate() {
            for c in 0..n {
                buf.clear();
                buf.extend(nb.iter().map(|&u| src[u * n + c]));
                buf.sort_by(f64::total_cmp);
                out[v * n + c] = buf.iter().sum();
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::NeighborSum {
                x,
                neighbors: neighbors.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            m += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + width > n {
            return Err(Error::shape("slice_cols", &[m, n], &[m, start + width]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![m, width], out, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start + count > m {
            return Err(Error::shape("slice_rows", &[m, n], &[start + count, n]));
        }
        let out = self.value(x)[start * n..(start + count) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![count, n], out, Op::SliceRows { x, start }, rg))
    }

    /// Sum of all entries, as a scalar of shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping positions whose target equals `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", &[t, v], &[targets.len()]));
        }
        let src = self.value(logits);
        if src.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("NaN logits".into()));
        }
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        let mut count = 0;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt == ignore_index {
                continue;
            }
            if tgt >= v {
                return Err(Error::Contract(format!("target {tgt} outside vocabulary of {v}")));
            }
            let row = &src[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - mx).exp();
                z += *p;
            }
            probs[i * v..(i + 1) * v].iter_mut().for_each(|p| *p /= z);
            total += mx + z.ln() - row[tgt];
            count += 1;
        }
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(root).requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // leaves that are not trainable never expose a gradient
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let n = node.shape[1];
                if wants(*a) {
                    // dA = G · Bᵀ
                    let bv = &nodes[b.0].value;
                    gemm(m, n, k, g, false, bv, true, slot(nodes, grads, *a), true);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let av = &nodes[a.0].value;
                    gemm(k, m, n, av, true, g, false, slot(nodes, grads, *b), true);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = rows_cols(&nodes[a.0].shape);
                    let ga = slot(nodes, grads, *a);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        slot(nodes, grads, *v).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    slot(nodes, grads, *a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if wants(*b) {
                    slot(nodes, grads, *b).iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    slot(nodes, grads, *a)
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(d, (s, y))| *d += s * y);
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    slot(nodes, grads, *b)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (s, x))| *d += s * x);
                }
            }
            Op::AddRow(x, row) => {
                let (m, n) = rows_cols(&node.shape);
                if wants(*x) {
                    slot(nodes, grads, *x).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if wants(*row) {
                    let gr = slot(nodes, grads, *row);
                    for i in 0..m {
                        gr.iter_mut()
                            .zip(&g[i * n..(i + 1) * n])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    slot(nodes, grads, *a).iter_mut().zip(g).for_each(|(d, s)| *d += s * f);
                }
            }
            Op::ScaleBy(a, s) => {
                if wants(*a) {
                    let f = nodes[s.0].value[0];
                    slot(nodes, grads, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x * f);
                }
                if wants(*s) {
                    let av = &nodes[a.0].value;
                    let dot: f64 = g.iter().zip(av).map(|(p, q)| p * q).sum();
                    slot(nodes, grads, *s)[0] += dot;
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    slot(nodes, grads, *a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let av = &nodes[a.0].value;
                    slot(nodes, grads, *a)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (s, x))| {
                            if *x > 0.0 {
                                *d += s
                            }
                        });
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let av = &nodes[a.0].value;
                    slot(nodes, grads, *a)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (s, &x))| {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            *d += s * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                        });
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let (m, n) = rows_cols(&node.shape);
                    let y = &node.value;
                    let ga = slot(nodes, grads, *a);
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CausalMask(a) => {
                if wants(*a) {
                    let (m, n) = rows_cols(&node.shape);
                    let ga = slot(nodes, grads, *a);
                    for i in 0..m {
                        for j in 0..=i.min(n - 1) {
                            ga[i * n + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = rows_cols(&node.shape);
                let gv = &nodes[gain.0].value;
                if wants(*x) {
                    let gx = slot(nodes, grads, *x);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if wants(*gain) {
                    let gg = slot(nodes, grads, *gain);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(nodes, grads, *bias);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = node.shape[1];
                    let gt = slot(nodes, grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::NeighborSum { x, neighbors } => {
                if wants(*x) {
                    let n = node.shape[1];
                    let gx = slot(nodes, grads, *x);
                    for (v, nb) in neighbors.iter().enumerate() {
                        for &u in nb {
                            for c in 0..n {
                                gx[u * n + c] += g[v * n + c];
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = rows_cols(&node.shape);
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    if wants(*p) {
                        let gp = slot(nodes, grads, *p);
                        for i in 0..m {
                            gp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * n + off..i * n + off + w])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(*p) {
                        slot(nodes, grads, *p)
                            .iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(a, b)| *a += b);
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (m, w) = rows_cols(&node.shape);
                    let n = nodes[x.0].shape[1];
                    let gx = slot(nodes, grads, *x);
                    for i in 0..m {
                        gx[i * n + start..i * n + start + w]
                            .iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let n = node.shape[1];
                    let gx = slot(nodes, grads, *x);
                    gx[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    slot(nodes, grads, *a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                if wants(*logits) {
                    let v = nodes[logits.0].shape[1];
                    let w = g[0] / *count as f64;
                    let gl = slot(nodes, grads, *logits);
                    for (i, &tgt) in targets.iter().enumerate() {
                        if tgt == *ignore_index {
                            continue;
                        }
                        for j in 0..v {
                            gl[i * v + j] += w * probs[i * v + j];
                        }
                        gl[i * v + tgt] -= w;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.leaf(&Tensor::eye(2));
        let x = tape.leaf(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn small_matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(&t(&[2, 1], &[0., 1.]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 1]);
        assert_eq!(tape.value(y), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[0., 0., 0., 1000., 0., f64::NEG_INFINITY]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0).abs() < 1e-12 && v[4].abs() < 1e-12 && v[5] == 0.0);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[f64::NAN, 0.]));
        assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn uniform_cross_entropy_is_ln_v() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[3, 4]));
        let l = tape.cross_entropy(x, &[0, 3, 2], usize::MAX).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_confident_target_tends_to_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 3], &[0., 800., 0.]));
        let l = tape.cross_entropy(x, &[1], usize::MAX).unwrap();
        assert!(tape.scalar(l) < 1e-300);
    }

    #[test]
    fn all_ignored_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 4]));
        assert!(matches!(tape.cross_entropy(x, &[9, 9], 9), Err(Error::DegenerateBatch)));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1., -2., 3., 0.5]).trainable());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn frozen_leaf_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[1., 2.]).trainable());
        let w = tape.leaf(&t(&[2, 2], &[1., 0., 0., 1.]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 2]).trainable());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn truncate_forgets_later_nodes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2]));
        let mark = tape.len();
        tape.scale(x, 2.0);
        tape.truncate(mark);
        assert_eq!(tape.len(), 1);
    }
}
