//! Dynamic reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass. Every node owns a dense row-major
//! block of `rows x cols` values inside one flat buffer; vectors are `1 x n`
//! and scalars `1 x 1`. [`Tape::backward`] sweeps the nodes in exact reverse
//! order of creation, and [`Tape::accumulate`] adds the gradients of
//! parameter leaves into a [`ParamStore`].
//!
//! Shape errors inside the tape are programmer errors and panic; user-facing
//! dimension checks happen before values reach the tape.

use crate::error::{Error, Result};
use crate::nn::param::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct AttentionOp {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    tq: usize,
    tk: usize,
    heads: usize,
    causal: bool,
    key_lens: Vec<usize>,
    probs: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { id: ParamId, row: Option<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Var),
    Affine { x: Var, a: f64 },
    Recip(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Artanh(Var),
    Arcosh(Var),
    Relu(Var),
    Dot(Var, Var),
    Norm(Var),
    Sum(Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddRow(Var, Var),
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    Project { x: Var, max_norm: f64 },
    RowDot(Var, Var),
    ScaleRows(Var, Var),
    TanhRatio(Var),
    ArtanhRatio(Var),
    Reshape(Var),
    StopGrad,
    StraightThrough { source: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: usize },
    Attention(Box<AttentionOp>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: usize },
}

#[derive(Debug)]
struct Node {
    off: usize,
    rows: usize,
    cols: usize,
    op: Op,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

const ARTANH_LIMIT: f64 = 1.0 - 1e-15;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    data: Vec<f64>,
    grad: Vec<f64>,
    aux: Vec<f64>,
}

/// `c = alpha * a * b + beta * c` with explicit strides, row-major friendly.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index touched by dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = self.node(v);
        &self.data[n.off..n.off + n.len()]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.len(), 1, "not a scalar node");
        self.data[n.off]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        let n = self.node(v);
        if self.grad.len() < n.off + n.len() {
            return &[];
        }
        &self.grad[n.off..n.off + n.len()]
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(values.len(), rows * cols);
        let off = self.data.len();
        self.data.extend_from_slice(&values);
        self.nodes.push(Node { off, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    /// Append a zeroed `rows x cols` node and let `fill` write it, reading
    /// earlier nodes through the first slice. Saves the temporary buffer
    /// that [`Tape::push`] copies from.
    fn emit(&mut self, rows: usize, cols: usize, op: Op, fill: impl FnOnce(&Self, &[f64], &mut [f64])) -> Var {
        let off = self.data.len();
        let mut data = std::mem::take(&mut self.data);
        data.resize(off + rows * cols, 0.0);
        {
            let (before, out) = data.split_at_mut(off);
            fill(self, before, out);
        }
        self.data = data;
        self.nodes.push(Node { off, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    /// Slice of node `v` inside `data`, the arena prefix handed to `emit`.
    fn view<'d>(&self, data: &'d [f64], v: Var) -> &'d [f64] {
        let n = self.node(v);
        &data[n.off..n.off + n.len()]
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(x);
        self.emit(r, c, op, |t, data, out| {
            for (o, &v) in out.iter_mut().zip(t.view(data, x)) {
                *o = f(v);
            }
        })
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "elementwise shape mismatch");
        self.emit(shape.0, shape.1, op, |t, data, out| {
            for ((o, &x), &y) in out.iter_mut().zip(t.view(data, a)).zip(t.view(data, b)) {
                *o = f(x, y);
            }
        })
    }

    // ---- leaves ----

    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        assert_eq!(values.len(), rows * cols);
        self.push(rows, cols, values, Op::Leaf)
    }

    pub fn vector(&mut self, values: &[f64]) -> Var {
        self.leaf(1, values.len(), values.to_vec())
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.leaf(1, 1, vec![x])
    }

    /// Whole parameter as a leaf; its gradient flows back on `accumulate`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.rows, p.cols, p.values.clone(), Op::Param { id, row: None })
    }

    /// One row of a parameter matrix as a `1 x cols` leaf.
    pub fn param_row(&mut self, store: &ParamStore, id: ParamId, row: usize) -> Var {
        let p = store.get(id);
        self.push(1, p.cols, p.row(row).to_vec(), Op::Param { id, row: Some(row) })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a * s` where `s` is a scalar node.
    pub fn scale(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * sv).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    /// `a * x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        self.unary(x, Op::Affine { x, a }, |v| a * v + b)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// `artanh` with the argument clamped to `[-1 + 1e-15, 1 - 1e-15]`.
    pub fn artanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Artanh(x), |v| v.clamp(-ARTANH_LIMIT, ARTANH_LIMIT).atanh())
    }

    /// `arcosh` with the argument clamped to `[1, inf)`.
    pub fn arcosh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Arcosh(x), crate::geometry::arcosh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn div(&mut self, a: Var, s: Var) -> Var {
        let r = self.recip(s);
        self.scale(a, r)
    }

    // ---- reductions ----

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.node(a).len(), self.node(b).len());
        let v = crate::geometry::dot(self.value(a), self.value(b));
        self.push(1, 1, vec![v], Op::Dot(a, b))
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        self.dot(a, a)
    }

    pub fn norm(&mut self, a: Var) -> Var {
        let v = crate::geometry::norm(self.value(a));
        self.push(1, 1, vec![v], Op::Norm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        self.push(1, 1, vec![v], Op::Sum(a))
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter();
        let first = *iter.next().expect("add_all needs at least one term");
        iter.fold(first, |acc, &t| self.add(acc, t))
    }

    // ---- matrix ----

    /// `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        self.emit(m, n, Op::MatMul(a, b), |t, data, out| {
            gemm(m, k, n, t.view(data, a), (k, 1), t.view(data, b), (n, 1), 0.0, out);
        })
    }

    /// `a[m,k] * b[n,k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt inner dimension");
        self.emit(m, n, Op::MatMulBt(a, b), |t, data, out| {
            gemm(m, k, n, t.view(data, a), (k, 1), t.view(data, b), (1, k), 0.0, out);
        })
    }

    /// `a[m,n] + b[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (1, n), "add_row bias shape");
        self.emit(m, n, Op::AddRow(a, b), |t, data, out| {
            let bias = t.view(data, b);
            for (o, row) in out.chunks_mut(n).zip(t.view(data, a).chunks(n)) {
                for ((o, x), y) in o.iter_mut().zip(row).zip(bias) {
                    *o = x + y;
                }
            }
        })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (r, c) = self.shape(x);
        assert!(!rows.is_empty());
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            assert!(i < r, "gather index out of range");
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(rows.len(), c, out, Op::GatherRows(x, rows.to_vec()))
    }

    /// Concatenate the flattened values of `parts` into one `1 x n` vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        self.push(1, n, out, Op::Concat(parts.to_vec()))
    }

    // ---- geometry helpers ----

    /// Rescale each row of `x` onto the sphere of radius `max_norm` when its
    /// norm reaches it; rows strictly inside are unchanged.
    pub fn project_rows(&mut self, x: Var, max_norm: f64) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let n = crate::geometry::norm(row);
            if n >= max_norm {
                for v in row.iter_mut() {
                    *v *= max_norm / n;
                }
            }
        }
        self.push(r, c, out, Op::Project { x, max_norm })
    }

    /// Row-wise inner products: `[m,n] x [m,n] -> [m,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (m, n), "row_dot shape mismatch");
        let out = self
            .value(a)
            .chunks(n)
            .zip(self.value(b).chunks(n))
            .map(|(x, y)| crate::geometry::dot(x, y))
            .collect();
        self.push(m, 1, out, Op::RowDot(a, b))
    }

    /// Multiply row `i` of `x [m,n]` by `s[i]` for `s [m,1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(s), (m, 1), "scale_rows factor shape");
        let out = self
            .value(x)
            .chunks(n)
            .zip(self.value(s))
            .flat_map(|(row, f)| row.iter().map(move |v| v * f))
            .collect();
        self.push(m, n, out, Op::ScaleRows(x, s))
    }

    /// `tanh(t) / t`, continuous at zero.
    pub fn tanh_ratio(&mut self, x: Var) -> Var {
        self.unary(x, Op::TanhRatio(x), tanh_ratio)
    }

    /// `artanh(t) / t` with the clamped `artanh`, continuous at zero.
    pub fn artanh_ratio(&mut self, x: Var) -> Var {
        self.unary(x, Op::ArtanhRatio(x), artanh_ratio)
    }

    /// Same values viewed as `rows x cols`.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.node(x).len(), rows * cols, "reshape size");
        let out = self.value(x).to_vec();
        self.push(rows, cols, out, Op::Reshape(x))
    }

    // ---- gradient routing ----

    /// Same value as `x`, no gradient flows back into `x`.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).to_vec();
        self.push(r, c, out, Op::StopGrad)
    }

    /// Forward value of `value`, backward identity into `source`.
    pub fn straight_through(&mut self, source: Var, value: Var) -> Var {
        let shape = self.shape(source);
        assert_eq!(shape, self.shape(value), "straight-through shape mismatch");
        let out = self.value(value).to_vec();
        self.push(shape.0, shape.1, out, Op::StraightThrough { source })
    }

    // ---- fused network ops ----

    /// Row-wise layer normalization with learned `gain` and `bias` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gain), (1, n));
        assert_eq!(self.shape(bias), (1, n));
        let stats = self.aux.len();
        let mut out = Vec::with_capacity(m * n);
        let mut st = Vec::with_capacity(2 * m);
        {
            let g = self.value(gain);
            let b = self.value(bias);
            for row in self.value(x).chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rstd = 1.0 / (var + LN_EPS).sqrt();
                for j in 0..n {
                    out.push(g[j] * (row[j] - mean) * rstd + b[j]);
                }
                st.push(mean);
                st.push(rstd);
            }
        }
        self.aux.extend(st);
        self.push(m, n, out, Op::LayerNorm { x, gain, bias, stats })
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `q` is `(batch*tq) x d`, `k` and `v` are `(batch*tk) x d`, with
    /// `d = heads * head_dim`. Keys at positions `>= key_lens[b]` are masked;
    /// `causal` additionally masks keys after the query position.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tq: usize,
        tk: usize,
        heads: usize,
        causal: bool,
        key_lens: &[usize],
    ) -> Var {
        let (qr, d) = self.shape(q);
        assert_eq!(qr, batch * tq);
        assert_eq!(self.shape(k), (batch * tk, d));
        assert_eq!(self.shape(v), (batch * tk, d));
        assert_eq!(key_lens.len(), batch);
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let probs_off = self.aux.len();
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; batch * tq * d];
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            let mut scores = vec![0.0; tk];
            for b in 0..batch {
                let len = key_lens[b].min(tk);
                assert!(len > 0, "attention needs at least one key");
                for h in 0..heads {
                    let col = h * dh;
                    for i in 0..tq {
                        let qrow = &qv[(b * tq + i) * d + col..(b * tq + i) * d + col + dh];
                        let limit = if causal { len.min(i + 1) } else { len };
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..limit {
                            let krow = &kv[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                            let s = crate::geometry::dot(qrow, krow) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                        let mut total = 0.0;
                        for s in scores.iter_mut().take(limit) {
                            *s = (*s - max).exp();
                            total += *s;
                        }
                        let prow = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                        let orow = &mut out[(b * tq + i) * d + col..(b * tq + i) * d + col + dh];
                        for j in 0..limit {
                            let p = scores[j] / total;
                            prow[j] = p;
                            let vrow = &vv[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        self.aux.extend(probs);
        let op = AttentionOp {
            q,
            k,
            v,
            batch,
            tq,
            tk,
            heads,
            causal,
            key_lens: key_lens.to_vec(),
            probs: probs_off,
        };
        self.push(batch * tq, d, out, Op::Attention(Box::new(op)))
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (m, n) = self.shape(logits);
        assert_eq!(targets.len(), m);
        let probs_off = self.aux.len();
        let mut probs = Vec::with_capacity(m * n);
        let mut total = 0.0;
        for (row, &t) in self.value(logits).chunks(n).zip(targets) {
            assert!(t < n, "cross-entropy target out of range");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        self.aux.extend(probs);
        self.push(
            1,
            1,
            vec![total / m as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs: probs_off,
            },
        )
    }

    // ---- backward ----

    /// Reverse sweep from the scalar `loss`. Gradients for every node are
    /// readable through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).len() != 1 {
            return Err(Error::Usage("backward needs a scalar loss".into()));
        }
        self.grad.clear();
        self.grad.resize(self.data.len(), 0.0);
        let root = self.node(loss).off;
        self.grad[root] = 1.0;
        let nodes = &self.nodes;
        let data = &self.data;
        let aux = &self.aux;
        let grad = &mut self.grad;
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            let (lower, upper) = grad.split_at_mut(node.off);
            let g = &upper[..node.len()];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            backprop(nodes, data, aux, node, g, lower);
        }
        Ok(())
    }

    /// Add gradients of parameter leaves into `store`.
    pub fn accumulate(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Op::Param { id, row } = node.op {
                if self.grad.len() < node.off + node.len() {
                    continue;
                }
                let g = &self.grad[node.off..node.off + node.len()];
                let p = store.get_mut(id);
                let dst = match row {
                    Some(r) => {
                        let c = p.cols;
                        &mut p.grad[r * c..(r + 1) * c]
                    }
                    None => &mut p.grad[..],
                };
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    /// `backward` followed by `accumulate`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        self.accumulate(store);
        Ok(())
    }
}

const SERIES_CUTOFF: f64 = 1e-4;

fn tanh_ratio(t: f64) -> f64 {
    if t.abs() < SERIES_CUTOFF {
        1.0 - t * t / 3.0
    } else {
        t.tanh() / t
    }
}

fn tanh_ratio_grad(t: f64) -> f64 {
    if t.abs() < SERIES_CUTOFF {
        -2.0 * t / 3.0
    } else {
        let th = t.tanh();
        ((1.0 - th * th) * t - th) / (t * t)
    }
}

fn artanh_ratio(t: f64) -> f64 {
    if t.abs() < SERIES_CUTOFF {
        1.0 + t * t / 3.0
    } else {
        t.clamp(-ARTANH_LIMIT, ARTANH_LIMIT).atanh() / t
    }
}

fn artanh_ratio_grad(t: f64) -> f64 {
    if t.abs() < SERIES_CUTOFF {
        2.0 * t / 3.0
    } else if t.abs() >= ARTANH_LIMIT {
        // the clamped numerator is constant
        -artanh_ratio(t) / t
    } else {
        (t / (1.0 - t * t) - t.atanh()) / (t * t)
    }
}

fn slot<'a>(nodes: &[Node], lower: &'a mut [f64], v: Var) -> &'a mut [f64] {
    let n = &nodes[v.0];
    &mut lower[n.off..n.off + n.len()]
}

fn val<'a>(nodes: &[Node], data: &'a [f64], v: Var) -> &'a [f64] {
    let n = &nodes[v.0];
    &data[n.off..n.off + n.len()]
}

fn backprop(nodes: &[Node], data: &[f64], aux: &[f64], node: &Node, g: &[f64], lower: &mut [f64]) {
    let out = &data[node.off..node.off + node.len()];
    match &node.op {
        Op::Leaf | Op::Param { .. } | Op::StopGrad => {}
        Op::Add(a, b) => {
            for (d, s) in slot(nodes, lower, *a).iter_mut().zip(g) {
                *d += s;
            }
            for (d, s) in slot(nodes, lower, *b).iter_mut().zip(g) {
                *d += s;
            }
        }
        Op::Sub(a, b) => {
            for (d, s) in slot(nodes, lower, *a).iter_mut().zip(g) {
                *d += s;
            }
            for (d, s) in slot(nodes, lower, *b).iter_mut().zip(g) {
                *d -= s;
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(nodes, data, *a), val(nodes, data, *b));
            for ((d, s), y) in slot(nodes, lower, *a).iter_mut().zip(g).zip(bv) {
                *d += s * y;
            }
            for ((d, s), x) in slot(nodes, lower, *b).iter_mut().zip(g).zip(av) {
                *d += s * x;
            }
        }
        Op::Scale(a, s) => {
            let av = val(nodes, data, *a);
            let sv = val(nodes, data, *s)[0];
            let gs: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
            for (d, x) in slot(nodes, lower, *a).iter_mut().zip(g) {
                *d += x * sv;
            }
            slot(nodes, lower, *s)[0] += gs;
        }
        Op::Affine { x, a } => {
            for (d, s) in slot(nodes, lower, *x).iter_mut().zip(g) {
                *d += a * s;
            }
        }
        Op::Recip(x) => {
            for ((d, s), o) in slot(nodes, lower, *x).iter_mut().zip(g).zip(out) {
                *d -= s * o * o;
            }
        }
        Op::Sqrt(x) => {
            for ((d, s), o) in slot(nodes, lower, *x).iter_mut().zip(g).zip(out) {
                if *o > 0.0 {
                    *d += s / (2.0 * o);
                }
            }
        }
        Op::Exp(x) => {
            for ((d, s), o) in slot(nodes, lower, *x).iter_mut().zip(g).zip(out) {
                *d += s * o;
            }
        }
        Op::Ln(x) => {
            let xv = val(nodes, data, *x);
            for ((d, s), v) in slot(nodes, lower, *x).iter_mut().zip(g).zip(xv) {
                *d += s / v;
            }
        }
        Op::Tanh(x) => {
            for ((d, s), o) in slot(nodes, lower, *x).iter_mut().zip(g).zip(out) {
                *d += s * (1.0 - o * o);
            }
        }
        Op::Artanh(x) => {
            let xv = val(nodes, data, *x);
            for ((d, s), v) in slot(nodes, lower, *x).iter_mut().zip(g).zip(xv) {
                if v.abs() < ARTANH_LIMIT {
                    *d += s / (1.0 - v * v);
                }
            }
        }
        Op::Arcosh(x) => {
            let xv = val(nodes, data, *x);
            for ((d, s), v) in slot(nodes, lower, *x).iter_mut().zip(g).zip(xv) {
                let t = (v - 1.0) * (v + 1.0);
                if t > 0.0 {
                    *d += s / t.sqrt();
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(nodes, data, *x);
            for ((d, s), v) in slot(nodes, lower, *x).iter_mut().zip(g).zip(xv) {
                if *v > 0.0 {
                    *d += s;
                }
            }
        }
        Op::Dot(a, b) => {
            let s = g[0];
            let (av, bv) = (val(nodes, data, *a), val(nodes, data, *b));
            for (d, y) in slot(nodes, lower, *a).iter_mut().zip(bv) {
                *d += s * y;
            }
            for (d, x) in slot(nodes, lower, *b).iter_mut().zip(av) {
                *d += s * x;
            }
        }
        Op::Norm(x) => {
            let n = out[0];
            if n > 0.0 {
                let s = g[0] / n;
                let xv = val(nodes, data, *x);
                for (d, v) in slot(nodes, lower, *x).iter_mut().zip(xv) {
                    *d += s * v;
                }
            }
        }
        Op::Sum(x) => {
            for d in slot(nodes, lower, *x).iter_mut() {
                *d += g[0];
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let n = nodes[b.0].cols;
            let (av, bv) = (val(nodes, data, *a), val(nodes, data, *b));
            // da[m,k] += g[m,n] * b^T ; db[k,n] += a^T * g
            gemm(m, n, k, g, (n, 1), bv, (1, n), 1.0, slot(nodes, lower, *a));
            gemm(k, m, n, av, (1, k), g, (n, 1), 1.0, slot(nodes, lower, *b));
        }
        Op::MatMulBt(a, b) => {
            let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let n = nodes[b.0].rows;
            let (av, bv) = (val(nodes, data, *a), val(nodes, data, *b));
            // da[m,k] += g[m,n] * b[n,k] ; db[n,k] += g^T * a
            gemm(m, n, k, g, (n, 1), bv, (k, 1), 1.0, slot(nodes, lower, *a));
            gemm(n, m, k, g, (1, n), av, (k, 1), 1.0, slot(nodes, lower, *b));
        }
        Op::AddRow(a, b) => {
            let n = node.cols;
            for (d, s) in slot(nodes, lower, *a).iter_mut().zip(g) {
                *d += s;
            }
            let db = slot(nodes, lower, *b);
            for row in g.chunks(n) {
                for (d, s) in db.iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        Op::GatherRows(x, rows) => {
            let c = node.cols;
            let dx = slot(nodes, lower, *x);
            for (i, &r) in rows.iter().enumerate() {
                for (d, s) in dx[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                    *d += s;
                }
            }
        }
        Op::Concat(parts) => {
            let mut at = 0;
            for p in parts {
                let dst = slot(nodes, lower, *p);
                let len = dst.len();
                for (d, s) in dst.iter_mut().zip(&g[at..at + len]) {
                    *d += s;
                }
                at += len;
            }
        }
        Op::Project { x, max_norm } => {
            let c = node.cols;
            let xv = val(nodes, data, *x);
            let dx = slot(nodes, lower, *x);
            for ((xr, gr), dr) in xv.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                let n = crate::geometry::norm(xr);
                if n < *max_norm {
                    for (d, s) in dr.iter_mut().zip(gr) {
                        *d += s;
                    }
                } else {
                    // d/dx (m x / |x|) = (m/|x|)(I - x x^T / |x|^2)
                    let xg = crate::geometry::dot(xr, gr);
                    let f = max_norm / n;
                    for ((d, s), v) in dr.iter_mut().zip(gr).zip(xr) {
                        *d += f * (s - v * xg / (n * n));
                    }
                }
            }
        }
        Op::RowDot(a, b) => {
            let n = nodes[a.0].cols;
            let (av, bv) = (val(nodes, data, *a), val(nodes, data, *b));
            for (i, s) in g.iter().enumerate() {
                for (d, y) in slot(nodes, lower, *a)[i * n..(i + 1) * n].iter_mut().zip(&bv[i * n..(i + 1) * n]) {
                    *d += s * y;
                }
                for (d, x) in slot(nodes, lower, *b)[i * n..(i + 1) * n].iter_mut().zip(&av[i * n..(i + 1) * n]) {
                    *d += s * x;
                }
            }
        }
        Op::ScaleRows(x, f) => {
            let n = node.cols;
            let (xv, fv) = (val(nodes, data, *x), val(nodes, data, *f));
            {
                let dx = slot(nodes, lower, *x);
                for (i, fi) in fv.iter().enumerate() {
                    for (d, s) in dx[i * n..(i + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *d += s * fi;
                    }
                }
            }
            let df = slot(nodes, lower, *f);
            for (i, d) in df.iter_mut().enumerate() {
                *d += crate::geometry::dot(&g[i * n..(i + 1) * n], &xv[i * n..(i + 1) * n]);
            }
        }
        Op::TanhRatio(x) => {
            let xv = val(nodes, data, *x);
            for ((d, s), t) in slot(nodes, lower, *x).iter_mut().zip(g).zip(xv) {
                *d += s * tanh_ratio_grad(*t);
            }
        }
        Op::ArtanhRatio(x) => {
            let xv = val(nodes, data, *x);
            for ((d, s), t) in slot(nodes, lower, *x).iter_mut().zip(g).zip(xv) {
                *d += s * artanh_ratio_grad(*t);
            }
        }
        Op::Reshape(x) => {
            for (d, s) in slot(nodes, lower, *x).iter_mut().zip(g) {
                *d += s;
            }
        }
        Op::StraightThrough { source } => {
            for (d, s) in slot(nodes, lower, *source).iter_mut().zip(g) {
                *d += s;
            }
        }
        Op::LayerNorm { x, gain, bias, stats } => {
            let (m, n) = (node.rows, node.cols);
            let xv = val(nodes, data, *x);
            let gv = val(nodes, data, *gain).to_vec();
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            let mut dxhat = vec![0.0; n];
            let mut xhat = vec![0.0; n];
            {
                let dx = slot(nodes, lower, *x);
                for i in 0..m {
                    let mean = aux[stats + 2 * i];
                    let rstd = aux[stats + 2 * i + 1];
                    let row = &xv[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = grow[j] * gv[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        dx[i * n + j] += rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
            for (d, s) in slot(nodes, lower, *gain).iter_mut().zip(&dgain) {
                *d += s;
            }
            for (d, s) in slot(nodes, lower, *bias).iter_mut().zip(&dbias) {
                *d += s;
            }
        }
        Op::Attention(op) => backprop_attention(nodes, data, aux, op, node.cols, g, lower),
        Op::CrossEntropy { logits, targets, probs } => {
            let n = nodes[logits.0].cols;
            let m = targets.len();
            let s = g[0] / m as f64;
            let dl = slot(nodes, lower, *logits);
            for (i, &t) in targets.iter().enumerate() {
                for j in 0..n {
                    let p = aux[probs + i * n + j];
                    let y = if j == t { 1.0 } else { 0.0 };
                    dl[i * n + j] += s * (p - y);
                }
            }
        }
    }
}

fn backprop_attention(
    nodes: &[Node],
    data: &[f64],
    aux: &[f64],
    op: &AttentionOp,
    d: usize,
    g: &[f64],
    lower: &mut [f64],
) {
    let AttentionOp {
        q,
        k,
        v,
        batch,
        tq,
        tk,
        heads,
        causal,
        ref key_lens,
        probs,
    } = *op;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qv = val(nodes, data, q).to_vec();
    let kv = val(nodes, data, k).to_vec();
    let vv = val(nodes, data, v).to_vec();
    let mut dq = vec![0.0; qv.len()];
    let mut dk = vec![0.0; kv.len()];
    let mut dv = vec![0.0; vv.len()];
    let mut dp = vec![0.0; tk];
    for b in 0..batch {
        let len = key_lens[b].min(tk);
        for h in 0..heads {
            let col = h * dh;
            for i in 0..tq {
                let limit = if causal { len.min(i + 1) } else { len };
                let prow = &aux[probs + ((b * heads + h) * tq + i) * tk..][..tk];
                let go = &g[(b * tq + i) * d + col..(b * tq + i) * d + col + dh];
                let mut weighted = 0.0;
                for j in 0..limit {
                    let vrow = &vv[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                    dp[j] = crate::geometry::dot(go, vrow);
                    weighted += prow[j] * dp[j];
                    let dvrow = &mut dv[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                    for (x, y) in dvrow.iter_mut().zip(go) {
                        *x += prow[j] * y;
                    }
                }
                let qi = (b * tq + i) * d + col;
                for j in 0..limit {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (b * tk + j) * d + col;
                    for t in 0..dh {
                        dq[qi + t] += ds * kv[kj + t];
                        dk[kj + t] += ds * qv[qi + t];
                    }
                }
            }
        }
    }
    for (dst, src) in [(q, dq), (k, dk), (v, dv)] {
        for (d, s) in slot(nodes, lower, dst).iter_mut().zip(&src) {
            *d += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Central differences of `f` with respect to every coordinate of `x`.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(x0: &[f64], rows: usize, build: impl Fn(&mut Tape, Var) -> Var) {
        let cols = x0.len() / rows;
        let mut t = Tape::new();
        let x = t.leaf(rows, cols, x0.to_vec());
        let y = build(&mut t, x);
        t.backward(y).unwrap();
        let analytic = t.grad(x).to_vec();
        let numeric = numeric_grad(x0, |p| {
            let mut t = Tape::new();
            let x = t.leaf(rows, cols, p.to_vec());
            let y = build(&mut t, x);
            t.scalar(y)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert_abs_diff_eq!(a, n, epsilon = 1e-6 * (1.0 + n.abs()));
        }
    }

    #[test]
    fn dot_gradient_is_other_argument() {
        let mut t = Tape::new();
        let w = t.vector(&[1.0, 2.0, 3.0]);
        let x = t.vector(&[0.5, -1.0, 4.0]);
        let l = t.dot(w, x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w), &[0.5, -1.0, 4.0]);
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let mut t = Tape::new();
        let w = t.vector(&[1.0, 2.0]);
        assert!(matches!(t.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn elementwise_gradients() {
        let x0 = [0.3, -0.4, 0.2];
        check(&x0, 1, |t, x| {
            let a = t.tanh(x);
            let b = t.artanh(a);
            let c = t.mul(b, x);
            let e = t.exp(c);
            let s = t.sum(e);
            let r = t.recip(s);
            let q = t.sqrt(s);
            let l = t.ln(q);
            let z = t.add(r, l);
            let n = t.norm(x);
            let w = t.affine(n, 3.0, 1.5);
            let ac = t.arcosh(w);
            let sc = t.scale(x, ac);
            let rl = t.relu(sc);
            let d = t.dot(rl, x);
            t.add(z, d)
        });
    }

    #[test]
    fn matrix_gradients() {
        let x0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        check(&x0, 3, |t, x| {
            let w = t.leaf(4, 2, (0..8).map(|i| (i as f64 * 0.11).cos()).collect());
            let y = t.matmul(x, w); // 3x2
            let z = t.matmul_bt(y, y); // 3x3
            let b = t.leaf(1, 3, vec![0.1, -0.2, 0.3]);
            let zb = t.add_row(z, b);
            let g = t.gather_rows(zb, &[2, 0, 2]);
            let s = t.sq_norm(g);
            t.affine(s, 0.1, 0.0)
        });
    }

    #[test]
    fn layer_norm_attention_and_cross_entropy_gradients() {
        let x0: Vec<f64> = (0..24).map(|i| (i as f64 * 0.53).sin()).collect();
        // batch 2, t 3, d 4, 2 heads
        check(&x0, 6, |t, x| {
            let gain = t.leaf(1, 4, vec![1.0, 0.5, -0.3, 2.0]);
            let bias = t.leaf(1, 4, vec![0.0, 0.1, 0.2, -0.1]);
            let h = t.layer_norm(x, gain, bias);
            let a = t.attention(h, x, h, 2, 3, 3, 2, true, &[3, 2]);
            let b = t.attention(a, h, x, 2, 3, 3, 2, false, &[2, 3]);
            t.cross_entropy(b, &[0, 3, 1, 2, 2, 0])
        });
    }

    #[test]
    fn project_gradient_outside_and_inside() {
        check(&[0.9, 0.8], 1, |t, x| {
            let p = t.project_rows(x, 0.5);
            let w = t.vector(&[0.3, -1.2]);
            t.dot(p, w)
        });
        check(&[0.1, 0.2], 1, |t, x| {
            let p = t.project_rows(x, 0.5);
            t.sq_norm(p)
        });
    }

    #[test]
    fn row_wise_gradients() {
        let x0 = [0.3, -0.2, 0.9, 0.8, 1e-5, 2e-5, -0.4, 0.05];
        check(&x0, 4, |t, x| {
            let n2 = t.row_dot(x, x);
            let n = t.sqrt(n2);
            let a = t.tanh_ratio(n);
            let half = t.affine(n, 0.5, 0.0);
            let h = t.artanh_ratio(half);
            let b = t.mul(a, h);
            let y = t.scale_rows(x, b);
            let p = t.project_rows(y, 0.7);
            let r = t.reshape(p, 2, 4);
            let w = t.leaf(2, 4, vec![0.5, -1.0, 0.25, 2.0, 1.5, -0.5, 0.3, 0.1]);
            let m = t.mul(r, w);
            t.sum(m)
        });
    }

    #[test]
    fn ratio_functions_are_continuous_at_series_cutoff() {
        for &t in &[SERIES_CUTOFF * 0.999, SERIES_CUTOFF * 1.001] {
            assert_abs_diff_eq!(tanh_ratio(t), t.tanh() / t, epsilon = 1e-15);
            assert_abs_diff_eq!(artanh_ratio(t), t.atanh() / t, epsilon = 1e-15);
        }
    }

    #[test]
    fn stop_gradient_blocks_and_straight_through_passes() {
        let mut t = Tape::new();
        let e = t.vector(&[1.0, 2.0]);
        let s = t.stop_grad(e);
        let l1 = t.sq_norm(s);
        t.backward(l1).unwrap();
        assert_eq!(t.grad(e), &[0.0, 0.0]);

        let mut t = Tape::new();
        let x = t.vector(&[0.4, 0.1]);
        let y = t.vector(&[0.5, 0.0]);
        let st = t.straight_through(x, y);
        assert_eq!(t.value(st), &[0.5, 0.0]);
        let sq = t.sq_norm(st);
        let l = t.affine(sq, 0.5, 0.0);
        t.backward(l).unwrap();
        // gradient of |y|^2/2 evaluated at y, delivered to x
        assert_eq!(t.grad(x), &[0.5, 0.0]);
        assert_eq!(t.grad(y), &[0.0, 0.0]);
    }
}
