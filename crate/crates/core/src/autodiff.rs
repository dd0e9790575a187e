//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive as it executes. Node indices are
//! assigned in execution order, so the index order is a topological order
//! and [`Tape::backward`] simply walks the nodes from last to first, visiting
//! each exactly once. A fresh tape is built for every training example.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

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
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Gelu(Var),
    CausalAttention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPool(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the right size when nothing flowed into it.
    pub fn get_or_zero(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape")
    }

    /// Records a tensor as a leaf; 1-d tensors become a single row.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn leaf_raw(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Var {
        assert_eq!(rows * cols, data.len(), "leaf shape");
        self.push(rows, cols, data, requires_grad, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, ng, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, used for the tied output head.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, ng, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            let (sa, sb) = (self.shape(a), self.shape(b));
            return Err(Error::Dimension {
                op: "add",
                lhs: vec![sa.0, sa.1],
                rhs: vec![sb.0, sb.1],
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, ng, Op::Add(a, b)))
    }

    /// Adds a `1×d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let (br, bc) = self.shape(row);
        if br != 1 || bc != c {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: vec![r, c],
                rhs: vec![br, bc],
            });
        }
        let b = self.value(row).to_vec();
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(&b).map(|(u, v)| u + v))
            .collect();
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(r, c, out, ng, Op::AddRow(x, row)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            let g = self.shape(gain);
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: vec![g.0, g.1],
            });
        }
        let mut out = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        {
            let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
            for i in 0..r {
                stats.push(tensor::layer_norm_row(
                    &xv[i * c..(i + 1) * c],
                    gv,
                    bv,
                    &mut out[i * c..(i + 1) * c],
                ));
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(r, c, out, ng, Op::LayerNorm { x, gain, bias, stats }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| tensor::gelu(v)).collect();
        let ng = self.ng(x);
        self.push(r, c, out, ng, Op::Gelu(x))
    }

    /// Multi-head causal self-attention over packed `[T × 3d]` query/key/value
    /// rows; position `i` attends to positions `0..=i`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (t, c3) = self.shape(qkv);
        if heads == 0 || c3 % (3 * heads) != 0 {
            return Err(Error::Dimension {
                op: "causal_attention",
                lhs: vec![t, c3],
                rhs: vec![heads],
            });
        }
        let d = c3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.value(qkv);
        let mut out = vec![0.0; t * d];
        let mut probs = vec![0.0; heads * t * t];
        let mut scores = vec![0.0; t];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..t {
                let q = &x[i * c3 + qo..i * c3 + qo + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let k = &x[j * c3 + ko..j * c3 + ko + dh];
                    let s = tensor::dot(q, k) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * t + i) * t..(h * t + i) * t + t];
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..=i {
                    let p = scores[j] / z;
                    prow[j] = p;
                    let v = &x[j * c3 + vo..j * c3 + vo + dh];
                    for (o, vv) in orow.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
        }
        let ng = self.ng(qkv);
        Ok(self.push(t, d, out, ng, Op::CausalAttention { qkv, heads, probs }))
    }

    /// Rows `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension {
                op: "gather",
                lhs: vec![r, c],
                rhs: vec![bad],
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let ng = self.ng(table);
        Ok(self.push(ids.len(), c, out, ng, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Column-wise mean of an `n×d` input, producing `1×d`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if n == 0 {
            return Err(Error::EmptyPool);
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = n as f64;
        out.iter_mut().for_each(|o| *o /= inv);
        let ng = self.ng(x);
        Ok(self.push(1, c, out, ng, Op::MeanPool(x)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![r, pc],
                    rhs: vec![c],
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, c, out, ng, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension {
                op: "select_rows",
                lhs: vec![r, c],
                rhs: vec![bad],
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(idx.len(), c, out, ng, Op::SelectRows(x, idx.to_vec())))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` holds.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = self.shape(logits);
        if targets.len() != n || mask.len() != n {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: vec![n, v],
                rhs: vec![bad],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoSupervision);
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row = &mut probs[i * v..(i + 1) * v];
            tensor::log_softmax_row(&lv[i * v..(i + 1) * v], row);
            loss -= row[targets[i]];
            row.iter_mut().for_each(|p| *p = p.exp());
        }
        let ng = self.ng(logits);
        Ok(self.push(
            1,
            1,
            vec![loss / count as f64],
            ng,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(1, 1, vec![s], ng, Op::Sum(x))
    }

    /// `Σ x ⊙ w`, a scalar probe used by gradient checks.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.value(x).len() {
            let (r, c) = self.shape(x);
            return Err(Error::Dimension {
                op: "weighted_sum",
                lhs: vec![r, c],
                rhs: vec![w.len()],
            });
        }
        let s = tensor::dot(self.value(x), w);
        let ng = self.ng(x);
        Ok(self.push(1, 1, vec![s], ng, Op::WeightedSum(x, w.to_vec())))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {
{
                    let v: Var = $v;
                    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].cols;
                if nodes[a.0].needs_grad {
                    let ga = slot!(*a);
                    tensor::matmul_nt_acc(g, &nodes[b.0].value, ga, m, n, k);
                }
                if nodes[b.0].needs_grad {
                    let gb = slot!(*b);
                    tensor::matmul_tn_acc(&nodes[a.0].value, g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].rows;
                if nodes[a.0].needs_grad {
                    let ga = slot!(*a);
                    tensor::matmul_acc(g, &nodes[b.0].value, ga, m, n, k);
                }
                if nodes[b.0].needs_grad {
                    let gb = slot!(*b);
                    tensor::matmul_tn_acc(g, &nodes[a.0].value, gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if nodes[v.0].needs_grad {
                        let gv = slot!(v);
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::AddRow(x, row) => {
                let c = node.cols;
                if nodes[x.0].needs_grad {
                    let gx = slot!(*x);
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if nodes[row.0].needs_grad {
                    let gr = slot!(*row);
                    for gr_row in g.chunks(c) {
                        gr.iter_mut().zip(gr_row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let c = node.cols;
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                if nodes[gain.0].needs_grad {
                    let gg = slot!(*gain);
                    for (i, &(mean, rstd)) in stats.iter().enumerate() {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * (xv[i * c + j] - mean) * rstd;
                        }
                    }
                }
                if nodes[bias.0].needs_grad {
                    let gb = slot!(*bias);
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                }
                if nodes[x.0].needs_grad {
                    let gx = slot!(*x);
                    let mut dxhat = vec![0.0; c];
                    for (i, &(mean, rstd)) in stats.iter().enumerate() {
                        let xr = &xv[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * (xr[j] - mean) * rstd;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * rstd;
                            gx[i * c + j] += rstd * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                let gx = slot!(*x);
                for i in 0..g.len() {
                    gx[i] += g[i] * tensor::gelu_grad(xv[i]);
                }
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let t = node.rows;
                let d = node.cols;
                let c3 = 3 * d;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let x = &nodes[qkv.0].value;
                let gx = slot!(*qkv);
                let mut dp = vec![0.0; t];
                for h in 0..*heads {
                    let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                    for i in 0..t {
                        let prow = &probs[(h * t + i) * t..(h * t + i) * t + t];
                        let gout = &g[i * d + h * dh..i * d + (h + 1) * dh];
                        let mut s = 0.0;
                        for j in 0..=i {
                            let v = &x[j * c3 + vo..j * c3 + vo + dh];
                            dp[j] = tensor::dot(gout, v);
                            s += prow[j] * dp[j];
                            let gv = &mut gx[j * c3 + vo..j * c3 + vo + dh];
                            for (o, go) in gv.iter_mut().zip(gout) {
                                *o += prow[j] * go;
                            }
                        }
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for e in 0..dh {
                                let kj = x[j * c3 + ko + e];
                                let qi = x[i * c3 + qo + e];
                                gx[i * c3 + qo + e] += ds * kj;
                                gx[j * c3 + ko + e] += ds * qi;
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = node.cols;
                let gt = slot!(*table);
                for (r, &i) in ids.iter().enumerate() {
                    let src = &g[r * c..(r + 1) * c];
                    gt[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(o, v)| *o += v);
                }
            }
            Op::MeanPool(x) => {
                let n = nodes[x.0].rows;
                let c = node.cols;
                let gx = slot!(*x);
                let inv = n as f64;
                for r in 0..n {
                    for j in 0..c {
                        gx[r * c + j] += g[j] / inv;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if nodes[p.0].needs_grad {
                        let gp = slot!(p);
                        gp.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(o, v)| *o += v);
                    }
                    off += len;
                }
            }
            Op::SelectRows(x, idx) => {
                let c = node.cols;
                let gx = slot!(*x);
                for (r, &i) in idx.iter().enumerate() {
                    gx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(o, v)| *o += v);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = nodes[logits.0].cols;
                let scale = g[0] / *count as f64;
                let gl = slot!(*logits);
                for (i, (&m, &t)) in mask.iter().zip(targets).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[i * v + j] += scale * (probs[i * v + j] - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                let gx = slot!(*x);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::WeightedSum(x, w) => {
                let gx = slot!(*x);
                gx.iter_mut().zip(w).for_each(|(o, wv)| *o += g[0] * wv);
            }
        }
    }
}
