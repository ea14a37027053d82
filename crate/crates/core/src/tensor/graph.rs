//! Eager tape: every op computes its value on construction and records what
//! it needs for the reverse pass. Nodes are appended in topological order, so
//! backward is a single reverse sweep over node indices.

use rand::Rng;

use super::{Scalar, Tensor, TensorError};

/// Additive bias applied to disallowed attention scores before softmax.
pub const MASK_BIAS: f64 = -1e9;

const NO_TARGET: u32 = u32::MAX;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    Causal,
    Bidirectional,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, din: usize, dout: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: S },
    Sum { a: usize },
    Mean { a: usize },
    Gelu { a: usize },
    Tanh { a: usize },
    Softmax { a: usize, cols: usize },
    LayerNorm { x: usize, g: usize, b: usize, cols: usize, xhat: Vec<S>, inv_std: Vec<S> },
    Embedding { table: usize, ids: Vec<u32>, dim: usize },
    Attention { qkv: usize, batch: usize, seq: usize, heads: usize, probs: Vec<S> },
    CrossEntropy { logits: usize, targets: Vec<u32>, cols: usize, count: usize, probs: Vec<S> },
    MeanRows { a: usize, groups: usize, cols: usize },
    Dropout { a: usize, mask: Vec<S> },
}

impl<S> Op<S> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Gelu { .. } => "gelu",
            Op::Tanh { .. } => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MeanRows { .. } => "mean_rows",
            Op::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// A reverse-mode computation graph over one scalar type.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * k * x * x)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node at index `len` or above.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Returns the root's value. Values are computed eagerly, so this is a lookup.
    pub fn forward(&self, root: Var) -> &[S] {
        self.nodes[root.0].value.data()
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = S::zero());
            }
        }
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Result<Var, TensorError> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op.tag() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, i: usize) -> &[S] {
        self.nodes[i].value.data()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::Rank { op, expected: 2, shape: s.to_vec() }),
        }
    }

    /// `a [m,k] @ b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), self.data(a.0), k, 1, self.data(b.0), n, 1, S::zero(), &mut out, n, 1);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    /// `a [m,k] @ b[n,k]^T`, used for the tied output projection.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), self.data(a.0), k, 1, self.data(b.0), 1, k, S::zero(), &mut out, n, 1);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    /// `x [rows,din] @ w [din,dout] + b [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (rows, din) = self.matrix_dims("linear", x)?;
        let (din2, dout) = self.matrix_dims("linear", w)?;
        if din != din2 {
            return Err(shape_err("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![S::zero(); rows * dout];
        let mut beta = S::zero();
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear", self.shape(w), self.shape(b)));
            }
            let bias = self.data(b.0);
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
            beta = S::one();
        }
        S::gemm(rows, din, dout, S::one(), self.data(x.0), din, 1, self.data(w.0), dout, 1, beta, &mut out, dout, 1);
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(
            Tensor::from_parts(vec![rows, dout], out),
            Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0), rows, din, dout },
            &inputs,
        )
    }

    fn elementwise(
        &mut self,
        tag: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(tag, self.shape(a), self.shape(b)));
        }
        let data = self.data(a.0).iter().zip(self.data(b.0)).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.elementwise("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.elementwise("sub", a, b, |x, y| x - y)?;
        self.push(t, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.elementwise("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var, TensorError> {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale { a: a.0, c }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.data(a.0).iter().fold(S::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.data(a.0).len();
        if n == 0 {
            return Err(TensorError::Usage("mean of an empty tensor".into()));
        }
        let s = self.data(a.0).iter().fold(S::zero(), |acc, &x| acc + x) / S::of(n as f64);
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, &[a.0])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a).map(gelu_fwd);
        self.push(t, Op::Gelu { a: a.0 }, &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a).map(|x| x.tanh());
        self.push(t, Op::Tanh { a: a.0 }, &[a.0])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let cols = *self.shape(a).last().ok_or(TensorError::Rank { op: "softmax", expected: 1, shape: vec![] })?;
        let mut out = self.data(a.0).to_vec();
        for row in out.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { a: a.0, cols }, &[a.0])
    }

    /// Layer normalisation over the last dimension with gain `g` and bias `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<Var, TensorError> {
        let (rows, cols) = self.matrix_dims("layer_norm", x)?;
        if self.shape(g) != [cols] || self.shape(b) != [cols] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(g)));
        }
        let eps = S::of(eps);
        let n = S::of(cols as f64);
        let xs = self.data(x.0);
        let (gain, bias) = (self.data(g.0), self.data(b.0));
        let mut xhat = vec![S::zero(); rows * cols];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = gain[c] * h + bias[c];
            }
        }
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::LayerNorm { x: x.0, g: g.0, b: b.0, cols, xhat, inv_std },
            &[x.0, g.0, b.0],
        )
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let (vocab, dim) = self.matrix_dims("embedding", table)?;
        let t = self.data(table.0);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(TensorError::Usage(format!("embedding id {id} out of range for table of {vocab} rows")));
            }
            out.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        self.push(
            Tensor::from_parts(vec![ids.len(), dim], out),
            Op::Embedding { table: table.0, ids: ids.to_vec(), dim },
            &[table.0],
        )
    }

    /// Multi-head scaled dot-product attention over a packed `[batch*seq, 3*d]`
    /// query/key/value projection. Returns `[batch*seq, d]`.
    pub fn attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        mask: AttentionMask,
    ) -> Result<Var, TensorError> {
        let (rows, width) = self.matrix_dims("attention", qkv)?;
        if rows != batch * seq || width % 3 != 0 || heads == 0 || (width / 3) % heads != 0 {
            return Err(shape_err("attention", &[batch * seq, 3 * heads], &[rows, width]));
        }
        let d = width / 3;
        let hd = d / heads;
        let scale = S::of(1.0 / (hd as f64).sqrt());
        let bias = S::of(MASK_BIAS);
        let src = self.data(qkv.0);
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); rows * d];
        for b in 0..batch {
            let base = b * seq * width;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let q = &src[base + h * hd..];
                let k = &src[base + d + h * hd..];
                let v = &src[base + 2 * d + h * hd..];
                S::gemm(seq, hd, seq, scale, q, width, 1, k, 1, width, S::zero(), p, seq, 1);
                for (i, row) in p.chunks_exact_mut(seq).enumerate() {
                    if mask == AttentionMask::Causal {
                        for x in &mut row[i + 1..] {
                            *x += bias;
                        }
                    }
                    softmax_in_place(row);
                }
                let o = &mut out[b * seq * d + h * hd..];
                S::gemm(seq, seq, hd, S::one(), p, seq, 1, v, width, 1, S::zero(), o, d, 1);
            }
        }
        self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::Attention { qkv: qkv.0, batch, seq, heads, probs },
            &[qkv.0],
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits [rows, classes]`. Rows with a `None` target are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var, TensorError> {
        let (rows, cols) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", &[rows, cols], &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::Usage("cross_entropy with no target positions".into()));
        }
        let z = self.data(logits.0);
        let mut probs = vec![S::zero(); rows * cols];
        let mut total = S::zero();
        let mut encoded = Vec::with_capacity(rows);
        for (r, t) in targets.iter().enumerate() {
            let row = &z[r * cols..(r + 1) * cols];
            let p = &mut probs[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for (pi, &zi) in p.iter_mut().zip(row) {
                *pi = (zi - lse).exp();
            }
            match t {
                Some(t) if (*t as usize) < cols => {
                    total += lse - row[*t as usize];
                    encoded.push(*t);
                }
                Some(t) => {
                    return Err(TensorError::Usage(format!("target {t} out of range for {cols} classes")));
                }
                None => encoded.push(NO_TARGET),
            }
        }
        let loss = total / S::of(count as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: encoded, cols, count, probs },
            &[logits.0],
        )
    }

    /// Averages consecutive row groups: `[groups*r, c] -> [groups, c]`.
    pub fn mean_rows(&mut self, a: Var, groups: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.matrix_dims("mean_rows", a)?;
        if groups == 0 || rows % groups != 0 {
            return Err(shape_err("mean_rows", &[rows, cols], &[groups]));
        }
        let per = rows / groups;
        let inv = S::of(1.0 / per as f64);
        let src = self.data(a.0);
        let mut out = vec![S::zero(); groups * cols];
        for g in 0..groups {
            let o = &mut out[g * cols..(g + 1) * cols];
            for r in 0..per {
                for (x, &y) in o.iter_mut().zip(&src[(g * per + r) * cols..(g * per + r + 1) * cols]) {
                    *x += y;
                }
            }
            o.iter_mut().for_each(|x| *x *= inv);
        }
        self.push(Tensor::from_parts(vec![groups, cols], out), Op::MeanRows { a: a.0, groups, cols }, &[a.0])
    }

    /// Inverted dropout with keep probability `1 - p`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Usage(format!("dropout rate {p} outside [0, 1)")));
        }
        let keep = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> =
            (0..self.data(a.0).len()).map(|_| if rng.random::<f64>() < p { S::zero() } else { keep }).collect();
        let data = self.data(a.0).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Dropout { a: a.0, mask }, &[a.0])
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<S>>> = Vec::new();
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        macro_rules! slot {
            ($j:expr) => {{
                let j = $j;
                let len = self.nodes[j].value.numel();
                adj[j].get_or_insert_with(|| vec![S::zero(); len])
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let da = slot!(a);
                    S::gemm(m, n, k, S::one(), g, n, 1, self.data(b), 1, n, S::one(), da, k, 1);
                }
                if self.wants(b) {
                    let db = slot!(b);
                    S::gemm(k, m, n, S::one(), self.data(a), 1, k, g, n, 1, S::one(), db, n, 1);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if self.wants(a) {
                    let da = slot!(a);
                    S::gemm(m, n, k, S::one(), g, n, 1, self.data(b), k, 1, S::one(), da, k, 1);
                }
                if self.wants(b) {
                    let db = slot!(b);
                    S::gemm(n, m, k, S::one(), g, 1, n, self.data(a), k, 1, S::one(), db, k, 1);
                }
            }
            &Op::Linear { x, w, b, rows, din, dout } => {
                if self.wants(x) {
                    let dx = slot!(x);
                    S::gemm(rows, dout, din, S::one(), g, dout, 1, self.data(w), 1, dout, S::one(), dx, din, 1);
                }
                if self.wants(w) {
                    let dw = slot!(w);
                    S::gemm(din, rows, dout, S::one(), self.data(x), 1, din, g, dout, 1, S::one(), dw, dout, 1);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let db = slot!(b);
                    for row in g.chunks_exact(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            &Op::Add { a, b } => {
                for j in [a, b] {
                    if self.wants(j) {
                        slot!(j).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    slot!(a).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if self.wants(b) {
                    slot!(b).iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let bv = self.data(b);
                    slot!(a).iter_mut().zip(g).zip(bv).for_each(|((d, &x), &y)| *d += x * y);
                }
                if self.wants(b) {
                    let av = self.data(a);
                    slot!(b).iter_mut().zip(g).zip(av).for_each(|((d, &x), &y)| *d += x * y);
                }
            }
            &Op::Scale { a, c } => {
                slot!(a).iter_mut().zip(g).for_each(|(d, &x)| *d += x * c);
            }
            &Op::Sum { a } => {
                let g0 = g[0];
                slot!(a).iter_mut().for_each(|d| *d += g0);
            }
            &Op::Mean { a } => {
                let n = self.nodes[a].value.numel();
                let g0 = g[0] / S::of(n as f64);
                slot!(a).iter_mut().for_each(|d| *d += g0);
            }
            &Op::Gelu { a } => {
                let av = self.data(a);
                slot!(a).iter_mut().zip(g).zip(av).for_each(|((d, &x), &v)| *d += x * gelu_grad(v));
            }
            &Op::Tanh { a } => {
                let y = self.nodes[i].value.data();
                slot!(a).iter_mut().zip(g).zip(y).for_each(|((d, &x), &t)| *d += x * (S::one() - t * t));
            }
            &Op::Softmax { a, cols } => {
                let y = self.nodes[i].value.data();
                let da = slot!(a);
                for ((drow, grow), yrow) in
                    da.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols))
                {
                    let dot = grow.iter().zip(yrow).fold(S::zero(), |s, (&x, &p)| s + x * p);
                    for ((d, &x), &p) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += p * (x - dot);
                    }
                }
            }
            Op::LayerNorm { x, g: gain, b, cols, xhat, inv_std } => {
                let (x, gain, b, cols) = (*x, *gain, *b, *cols);
                let gv = self.data(gain);
                if self.wants(gain) {
                    let dg = slot!(gain);
                    for (grow, hrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        dg.iter_mut().zip(grow).zip(hrow).for_each(|((d, &x), &h)| *d += x * h);
                    }
                }
                if self.wants(b) {
                    let db = slot!(b);
                    for grow in g.chunks_exact(cols) {
                        db.iter_mut().zip(grow).for_each(|(d, &x)| *d += x);
                    }
                }
                if self.wants(x) {
                    let dx = slot!(x);
                    let n = S::of(cols as f64);
                    let mut dh = vec![S::zero(); cols];
                    for (r, ((drow, grow), hrow)) in
                        dx.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(xhat.chunks_exact(cols)).enumerate()
                    {
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for c in 0..cols {
                            dh[c] = grow[c] * gv[c];
                            s1 += dh[c];
                            s2 += dh[c] * hrow[c];
                        }
                        let k = inv_std[r] / n;
                        for c in 0..cols {
                            drow[c] += k * (n * dh[c] - s1 - hrow[c] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids, dim } => {
                let (table, dim) = (*table, *dim);
                let dt = slot!(table);
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    dt[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]).for_each(|(d, &x)| *d += x);
                }
            }
            Op::Attention { qkv, batch, seq, heads, probs } => {
                let (qkv, batch, seq, heads) = (*qkv, *batch, *seq, *heads);
                let src = self.data(qkv);
                let width = self.nodes[qkv].value.shape()[1];
                let d = width / 3;
                let hd = d / heads;
                let scale = S::of(1.0 / (hd as f64).sqrt());
                let dq = slot!(qkv);
                let mut dp = vec![S::zero(); seq * seq];
                for b in 0..batch {
                    let base = b * seq * width;
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let go = &g[b * seq * d + h * hd..];
                        let q = &src[base + h * hd..];
                        let k = &src[base + d + h * hd..];
                        let v = &src[base + 2 * d + h * hd..];
                        // dV = P^T dO
                        S::gemm(
                            seq,
                            seq,
                            hd,
                            S::one(),
                            p,
                            1,
                            seq,
                            go,
                            d,
                            1,
                            S::one(),
                            &mut dq[base + 2 * d + h * hd..],
                            width,
                            1,
                        );
                        // dP = dO V^T
                        S::gemm(seq, hd, seq, S::one(), go, d, 1, v, 1, width, S::zero(), &mut dp, seq, 1);
                        for (drow, prow) in dp.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                            let dot = drow.iter().zip(prow).fold(S::zero(), |s, (&x, &y)| s + x * y);
                            for (x, &y) in drow.iter_mut().zip(prow) {
                                *x = y * (*x - dot);
                            }
                        }
                        // dQ = dS K * scale ; dK = dS^T Q * scale
                        S::gemm(
                            seq,
                            seq,
                            hd,
                            scale,
                            &dp,
                            seq,
                            1,
                            k,
                            width,
                            1,
                            S::one(),
                            &mut dq[base + h * hd..],
                            width,
                            1,
                        );
                        S::gemm(
                            seq,
                            seq,
                            hd,
                            scale,
                            &dp,
                            1,
                            seq,
                            q,
                            width,
                            1,
                            S::one(),
                            &mut dq[base + d + h * hd..],
                            width,
                            1,
                        );
                    }
                }
            }
            Op::CrossEntropy { logits, targets, cols, count, probs } => {
                let (logits, cols) = (*logits, *cols);
                let w = g[0] / S::of(*count as f64);
                let dz = slot!(logits);
                for (r, &t) in targets.iter().enumerate() {
                    if t == NO_TARGET {
                        continue;
                    }
                    let row = &mut dz[r * cols..(r + 1) * cols];
                    for (d, &p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                        *d += w * p;
                    }
                    row[t as usize] -= w;
                }
            }
            &Op::MeanRows { a, groups, cols } => {
                let rows = self.nodes[a].value.shape()[0];
                let per = rows / groups;
                let inv = S::of(1.0 / per as f64);
                let da = slot!(a);
                for r in 0..rows {
                    let gg = &g[(r / per) * cols..(r / per + 1) * cols];
                    da[r * cols..(r + 1) * cols].iter_mut().zip(gg).for_each(|(d, &x)| *d += x * inv);
                }
            }
            Op::Dropout { a, mask } => {
                slot!(*a).iter_mut().zip(g).zip(mask).for_each(|((d, &x), &m)| *d += x * m);
            }
        }
    }
}

pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let s = row.iter().fold(S::zero(), |a, &x| a + (x - max).exp());
    max + s.ln()
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let mut s = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    let inv = S::one() / s;
    row.iter_mut().for_each(|x| *x *= inv);
}
