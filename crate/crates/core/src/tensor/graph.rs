//! Tape-based reverse-mode autodiff over row-major matrices.
//!
//! Every node is viewed as a `rows × cols` matrix. Parameter nodes borrow
//! their values from a [`ParamStore`]; everything else is owned by the graph.

use std::borrow::Cow;

use rand::Rng;

use super::flops::{self, Category};
use super::params::{GradStore, ParamId, ParamStore};
use super::{ctc, log_sum_exp, quantize, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Silu(Var),
    Sigmoid(Var),
    Glu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    LogSoftmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, causal: bool, probs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Im2Col { x: Var, kernel: usize, stride: usize, pad: usize },
    DepthwiseConv { x: Var, w: Var },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    /// Scalar-valued node whose local gradients were computed in the forward pass.
    Fused(Vec<(Var, Vec<f64>)>),
}

struct Node<'p> {
    rows: usize,
    cols: usize,
    value: Cow<'p, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// A single forward computation and its tape.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'p>>,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// Graph without parameters, gradients enabled.
    pub fn new() -> Self {
        Graph { params: None, param_vars: Vec::new(), nodes: Vec::new(), grad_enabled: true }
    }

    /// Training graph over `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only graph: no node requires a gradient and no backward caches are kept.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph { grad_enabled: false, ..Self::with_params(params) }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, mut value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        quantize(&mut value);
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { rows, cols, value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.constant_raw(t.rows(), t.cols(), t.data().to_vec())
    }

    pub fn constant_raw(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len(), rows * cols, "constant shape");
        self.nodes.push(Node { rows, cols, value: Cow::Owned(data), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Constant borrowed for the graph's lifetime (no copy, no gradient).
    pub fn constant_ref(&mut self, rows: usize, cols: usize, data: &'p [f64]) -> Var {
        assert_eq!(data.len(), rows * cols, "constant shape");
        self.nodes.push(Node { rows, cols, value: Cow::Borrowed(data), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf input.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Cow::Owned(t.data().to_vec()),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let t = store.get(id);
        let node = Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Cow::Borrowed(t.data()),
            op: Op::Param,
            needs_grad: self.grad_enabled,
        };
        self.nodes.push(node);
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn row(&self, v: Var, i: usize) -> &[f64] {
        let n = &self.nodes[v.0];
        &n.value[i * n.cols..(i + 1) * n.cols]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.to_vec()).expect("node shape")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_in(Category::Other, a, b)
    }

    /// `a·b`, counting its multiply-adds under `cat`.
    pub fn matmul_in(&mut self, cat: Category, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}×{k} · {k2}×{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        flops::record(cat, (m * n * k) as u64);
        Ok(self.push(m, n, out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `1×n` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.nodes[bias.0].value.len() != n {
            return Err(Error::shape(format!("bias of {} for {n} cols", self.nodes[bias.0].value.len())));
        }
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.push(m, n, out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(m, n, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(m, n, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(m, n, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(m, n, out, Op::Scale(a, s), &[a])
    }

    // ---- activations ----

    pub fn exp(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(m, n, out, Op::Exp(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        self.push(m, n, out, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(m, n, out, Op::Sigmoid(a), &[a])
    }

    /// Gated linear unit over the column halves: `left ⊙ σ(right)`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let (m, n2) = self.shape(a);
        if n2 % 2 != 0 {
            return Err(Error::shape(format!("glu needs even width, got {n2}")));
        }
        let n = n2 / 2;
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for row in x.chunks(n2) {
            out.extend((0..n).map(|j| row[j] * sigmoid(row[n + j])));
        }
        Ok(self.push(m, n, out, Op::Glu(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.shape(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm gain/bias width"));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv[j] + bv[j];
            }
        }
        let keep = self.grad_enabled;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: if keep { xhat } else { Vec::new() },
            rstd: if keep { rstd } else { Vec::new() },
        };
        Ok(self.push(m, n, out, op, &[x, gain, bias]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(m, n, out, Op::LogSoftmax(a), &[a])
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `Tq×d`, `k` and `v` are `Tk×d`. With `causal`, query `i` sees
    /// keys `j ≤ i + (Tk − Tq)`, so a single query over a cache of `Tk`
    /// keys attends to all of them.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, d) = self.shape(q);
        let (tk, dk) = self.shape(k);
        if dk != d || self.shape(v) != (tk, d) || heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!(
                "attention q {tq}×{d}, k {tk}×{dk}, v {:?}, heads {heads}",
                self.shape(v)
            )));
        }
        if causal && tq > tk {
            return Err(Error::shape("causal attention with more queries than keys"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let shift = tk - tq.min(tk);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        let mut scores = vec![0.0; tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let limit = if causal { (i + shift + 1).min(tk) } else { tk };
                let qi = &qv[i * d + off..i * d + off + dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..limit {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    let s = dot(qi, kj) * scale;
                    scores[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for s in &mut scores[..limit] {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..limit {
                    let p = scores[j] / z;
                    prow[j] = p;
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        flops::record(Category::Attention, 2 * (tq * tk * d) as u64);
        let probs = if self.grad_enabled { probs } else { Vec::new() };
        Ok(self.push(tq, d, out, Op::Attention { q, k, v, heads, causal, probs }, &[q, k, v]))
    }

    /// Gathers rows of `table` (a parameter or any `V×d` node).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.shape(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::ClassOutOfRange { id, classes: vocab });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding of empty id list"));
        }
        Ok(self.push(ids.len(), d, out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Unfolds `T×C` into `T_out × (kernel·C)` patches with zero padding.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (t, c) = self.shape(x);
        if t + 2 * pad < kernel || stride == 0 {
            return Err(Error::shape("im2col input shorter than kernel"));
        }
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let xv = self.value(x);
        let mut out = vec![0.0; t_out * kernel * c];
        for o in 0..t_out {
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let src = src as usize;
                out[o * kernel * c + j * c..o * kernel * c + (j + 1) * c]
                    .copy_from_slice(&xv[src * c..(src + 1) * c]);
            }
        }
        Ok(self.push(t_out, kernel * c, out, Op::Im2Col { x, kernel, stride, pad }, &[x]))
    }

    /// Same-padded depthwise convolution over time. `w` is `kernel × C`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.shape(x);
        let (k, wc) = self.shape(w);
        if wc != c || k % 2 == 0 {
            return Err(Error::shape(format!("depthwise kernel {k}×{wc} for {c} channels")));
        }
        let pad = k / 2;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; t * c];
        for i in 0..t {
            for j in 0..k {
                let src = i as isize + j as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let src = src as usize;
                let orow = &mut out[i * c..(i + 1) * c];
                let xrow = &xv[src * c..(src + 1) * c];
                let wrow = &wv[j * c..(j + 1) * c];
                for ((o, a), b) in orow.iter_mut().zip(xrow).zip(wrow) {
                    *o += a * b;
                }
            }
        }
        flops::record(Category::Other, (t * c * k) as u64);
        Ok(self.push(t, c, out, Op::DepthwiseConv { x, w }, &[x, w]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if len == 0 || start + len > m {
            return Err(Error::shape(format!("slice rows {start}..{} of {m}", start + len)));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        Ok(self.push(len, n, out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.cols(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?);
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            if self.cols(p) != n {
                return Err(Error::shape("concat_rows width mismatch"));
            }
            out.extend_from_slice(self.value(p));
            m += self.rows(p);
        }
        Ok(self.push(m, n, out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if m * n != rows * cols {
            return Err(Error::shape(format!("reshape {m}×{n} to {rows}×{cols}")));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(rows, cols, out, Op::Reshape(x), &[x]))
    }

    /// Inverted dropout with mask drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let (m, n) = self.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..m * n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(a, b)| a * b).collect();
        self.push(m, n, out, Op::Dropout { x, mask }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn fused(&mut self, value: f64, parts: Vec<(Var, Vec<f64>)>) -> Var {
        let parents: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let parts = if self.grad_enabled { parts } else { Vec::new() };
        self.push(1, 1, vec![value], Op::Fused(parts), &parents)
    }

    // ---- losses ----

    /// Label-smoothed cross-entropy averaged over rows.
    ///
    /// Per row: `(1−ε)·NLL(target) + ε·mean_c NLL(c)`.
    pub fn xent_smoothed(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let (m, v) = self.shape(logits);
        if targets.len() != m {
            return Err(Error::shape(format!("{m} logit rows for {} targets", targets.len())));
        }
        if v < 2 {
            return Err(Error::shape("cross-entropy needs at least two classes"));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::invalid(format!("label smoothing {eps} outside [0,1)")));
        }
        let x = self.value(logits);
        let mut total = 0.0;
        let mut grad = vec![0.0; m * v];
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::ClassOutOfRange { id: t, classes: v });
            }
            let row = &x[i * v..(i + 1) * v];
            let lse = log_sum_exp(row);
            let mean_x = row.iter().sum::<f64>() / v as f64;
            total += lse - (1.0 - eps) * row[t] - eps * mean_x;
            let g = &mut grad[i * v..(i + 1) * v];
            for (gc, xc) in g.iter_mut().zip(row) {
                *gc = ((xc - lse).exp() - eps / v as f64) / m as f64;
            }
            g[t] -= (1.0 - eps) / m as f64;
        }
        Ok(self.fused(total / m as f64, vec![(logits, grad)]))
    }

    /// `Σ_rows KL(softmax(p) ‖ softmax(q)) / rows`.
    pub fn kl_categorical(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let (m, v) = self.same_shape(p_logits, q_logits, "kl_categorical")?;
        let (pv, qv) = (self.value(p_logits), self.value(q_logits));
        let mut total = 0.0;
        let mut gp = vec![0.0; m * v];
        let mut gq = vec![0.0; m * v];
        for i in 0..m {
            let pr = &pv[i * v..(i + 1) * v];
            let qr = &qv[i * v..(i + 1) * v];
            let (lp_norm, lq_norm) = (log_sum_exp(pr), log_sum_exp(qr));
            let mut d = 0.0;
            for c in 0..v {
                let lp = pr[c] - lp_norm;
                let lq = qr[c] - lq_norm;
                d += lp.exp() * (lp - lq);
            }
            total += d;
            for c in 0..v {
                let lp = pr[c] - lp_norm;
                let lq = qr[c] - lq_norm;
                let (p, q) = (lp.exp(), lq.exp());
                gp[i * v + c] = p * (lp - lq - d) / m as f64;
                gq[i * v + c] = (q - p) / m as f64;
            }
        }
        Ok(self.fused(total / m as f64, vec![(p_logits, gp), (q_logits, gq)]))
    }

    /// Symmetric R-Drop divergence `½(KL(a‖b) + KL(b‖a))`.
    pub fn kl_symmetric(&mut self, a: Var, b: Var) -> Result<Var> {
        let ab = self.kl_categorical(a, b)?;
        let ba = self.kl_categorical(b, a)?;
        let s = self.add(ab, ba)?;
        Ok(self.scale(s, 0.5))
    }

    /// CTC negative log-likelihood; `log_probs` is `T × (V+1)` with blank last.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize]) -> Result<Var> {
        let (t, c) = self.shape(log_probs);
        let out = ctc::ctc_forward(self.value(log_probs), t, c, target)?;
        Ok(self.fused(out.loss, vec![(log_probs, out.grad)]))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let x = self.value(pred);
        if x.len() != target.len() {
            return Err(Error::shape(format!("l1: {} vs {}", x.len(), target.len())));
        }
        let n = x.len() as f64;
        let total = x.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let grad = x.iter().zip(target).map(|(a, b)| (a - b).signum() / n).collect();
        Ok(self.fused(total, vec![(pred, grad)]))
    }

    /// Mean squared error against a constant target.
    pub fn l2_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let x = self.value(pred);
        if x.len() != target.len() {
            return Err(Error::shape(format!("l2: {} vs {}", x.len(), target.len())));
        }
        let n = x.len() as f64;
        let total = x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let grad = x.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect();
        Ok(self.fused(total, vec![(pred, grad)]))
    }

    /// Mean binary cross-entropy on logits, with positive-class weight `pos_weight`.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64], pos_weight: f64) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != targets.len() {
            return Err(Error::shape(format!("bce: {} vs {}", x.len(), targets.len())));
        }
        let n = x.len() as f64;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(x.len());
        for (&z, &y) in x.iter().zip(targets) {
            // -[w·y·ln σ(z) + (1−y)·ln(1−σ(z))]
            let log_sig = -softplus(-z);
            let log_one_minus = -softplus(z);
            total -= pos_weight * y * log_sig + (1.0 - y) * log_one_minus;
            let s = sigmoid(z);
            grad.push((pos_weight * y * (s - 1.0) + (1.0 - y) * s) / n);
        }
        Ok(self.fused(total / n, vec![(logits, grad)]))
    }

    // ---- backward ----

    /// Reverse pass from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0; self.nodes[loss.0].value.len()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node<'p>, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let k = self.cols(*a);
                if self.nodes[a.0].needs_grad {
                    // dA = dY · Bᵀ
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, m * k);
                    for i in 0..m {
                        let gyr = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(gyr, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dY
                    let av = self.value(*a);
                    let gb = slot(grads, *b, k * n);
                    for i in 0..m {
                        let gyr = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip != 0.0 {
                                axpy(a_ip, gyr, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if self.nodes[a.0].needs_grad {
                    add_into(slot(grads, *a, m * n), gy);
                }
                if self.nodes[bias.0].needs_grad {
                    let gb = slot(grads, *bias, n);
                    for row in gy.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.nodes[v.0].needs_grad {
                        add_into(slot(grads, *v, m * n), gy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].needs_grad {
                    add_into(slot(grads, *a, m * n), gy);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = slot(grads, *b, m * n);
                    for (g, d) in gb.iter_mut().zip(gy) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, m * n);
                    for ((g, d), y) in ga.iter_mut().zip(gy).zip(bv) {
                        *g += d * y;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.value(*a);
                    let gb = slot(grads, *b, m * n);
                    for ((g, d), x) in gb.iter_mut().zip(gy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                axpy(*s, gy, slot(grads, *a, m * n));
            }
            Op::Exp(a) => {
                let yv = &node.value;
                let ga = slot(grads, *a, m * n);
                for ((g, d), y) in ga.iter_mut().zip(gy).zip(yv.iter()) {
                    *g += d * y;
                }
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                let ga = slot(grads, *a, m * n);
                for ((g, d), &x) in ga.iter_mut().zip(gy).zip(xv) {
                    let s = sigmoid(x);
                    *g += d * (s * (1.0 + x * (1.0 - s)));
                }
            }
            Op::Sigmoid(a) => {
                let yv = &node.value;
                let ga = slot(grads, *a, m * n);
                for ((g, d), y) in ga.iter_mut().zip(gy).zip(yv.iter()) {
                    *g += d * y * (1.0 - y);
                }
            }
            Op::Glu(a) => {
                let xv = self.value(*a);
                let ga = slot(grads, *a, m * 2 * n);
                for i in 0..m {
                    for j in 0..n {
                        let l = xv[i * 2 * n + j];
                        let s = sigmoid(xv[i * 2 * n + n + j]);
                        let d = gy[i * n + j];
                        ga[i * 2 * n + j] += d * s;
                        ga[i * 2 * n + n + j] += d * l * s * (1.0 - s);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain);
                if self.nodes[gain.0].needs_grad {
                    let gg = slot(grads, *gain, n);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += gy[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.nodes[bias.0].needs_grad {
                    let gb = slot(grads, *bias, n);
                    for row in gy.chunks(n) {
                        add_into(gb, row);
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let gx = slot(grads, *x, m * n);
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let h = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gy[i * n + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dot(&dxhat, h) / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let yv = &node.value;
                let ga = slot(grads, *a, m * n);
                for i in 0..m {
                    let gyr = &gy[i * n..(i + 1) * n];
                    let s: f64 = gyr.iter().sum();
                    for j in 0..n {
                        ga[i * n + j] += gyr[j] - yv[i * n + j].exp() * s;
                    }
                }
            }
            Op::Attention { q, k, v, heads, causal, probs } => {
                self.attention_backward(gy, *q, *k, *v, *heads, *causal, probs, grads);
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.shape(*table);
                let gt = slot(grads, *table, vocab * d);
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &gy[i * d..(i + 1) * d]);
                }
            }
            Op::Im2Col { x, kernel, stride, pad } => {
                let (t, c) = self.shape(*x);
                let gx = slot(grads, *x, t * c);
                for o in 0..m {
                    for j in 0..*kernel {
                        let src = (o * stride + j) as isize - *pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let src = src as usize;
                        add_into(
                            &mut gx[src * c..(src + 1) * c],
                            &gy[o * kernel * c + j * c..o * kernel * c + (j + 1) * c],
                        );
                    }
                }
            }
            Op::DepthwiseConv { x, w } => {
                let (k, c) = self.shape(*w);
                let t = m;
                let pad = k / 2;
                let (xv, wv) = (self.value(*x), self.value(*w));
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let mut gx = if need_x { vec![0.0; t * c] } else { Vec::new() };
                let mut gw = if need_w { vec![0.0; k * c] } else { Vec::new() };
                for i in 0..t {
                    for j in 0..k {
                        let src = i as isize + j as isize - pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let src = src as usize;
                        let gyr = &gy[i * c..(i + 1) * c];
                        if need_x {
                            let wrow = &wv[j * c..(j + 1) * c];
                            for ((g, d), wj) in gx[src * c..(src + 1) * c].iter_mut().zip(gyr).zip(wrow) {
                                *g += d * wj;
                            }
                        }
                        if need_w {
                            let xrow = &xv[src * c..(src + 1) * c];
                            for ((g, d), xs) in gw[j * c..(j + 1) * c].iter_mut().zip(gyr).zip(xrow) {
                                *g += d * xs;
                            }
                        }
                    }
                }
                if need_x {
                    add_into(slot(grads, *x, t * c), &gx);
                }
                if need_w {
                    add_into(slot(grads, *w, k * c), &gw);
                }
            }
            Op::SliceRows { x, start } => {
                let total = self.value(*x).len();
                let gx = slot(grads, *x, total);
                add_into(&mut gx[start * n..(start + m) * n], gy);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.nodes[p.0].needs_grad {
                        add_into(slot(grads, *p, len), &gy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Reshape(x) => {
                add_into(slot(grads, *x, m * n), gy);
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, m * n);
                for ((g, d), k) in gx.iter_mut().zip(gy).zip(mask) {
                    *g += d * k;
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                let gx = slot(grads, *x, len);
                gx.iter_mut().for_each(|g| *g += gy[0]);
            }
            Op::Fused(parts) => {
                for (v, local) in parts {
                    if self.nodes[v.0].needs_grad {
                        axpy(gy[0], local, slot(grads, *v, local.len()));
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gy: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, d) = self.shape(q);
        let tk = self.rows(k);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let shift = tk - tq.min(tk);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0; tq * d];
        let mut gk = vec![0.0; tk * d];
        let mut gv = vec![0.0; tk * d];
        let mut dp = vec![0.0; tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let limit = if causal { (i + shift + 1).min(tk) } else { tk };
                let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let gyi = &gy[i * d + off..i * d + off + dh];
                let mut acc = 0.0;
                for j in 0..limit {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    dp[j] = dot(gyi, vj);
                    acc += dp[j] * prow[j];
                    axpy(prow[j], gyi, &mut gv[j * d + off..j * d + off + dh]);
                }
                let qi = &qv[i * d + off..i * d + off + dh];
                for j in 0..limit {
                    let ds = prow[j] * (dp[j] - acc) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv[j * d + off..j * d + off + dh];
                    axpy(ds, kj, &mut gq[i * d + off..i * d + off + dh]);
                    axpy(ds, qi, &mut gk[j * d + off..j * d + off + dh]);
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].needs_grad {
                let len = g.len();
                add_into(slot(grads, var, len), &g);
            }
        }
    }

    /// Adds this graph's parameter gradients into `store`, scaled by `scale`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut GradStore, scale: f64) {
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.get(*v) {
                    store.accumulate(ParamId(i), g, scale);
                }
            }
        }
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn add_into(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                axpy(a_ip, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::flops;

    #[test]
    fn matmul_values_and_flops() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(&Tensor::matrix(3, 4, (0..12).map(|x| x as f64).collect()).unwrap());
        let (c, count) = flops::measure(|| g.matmul(a, b).unwrap());
        assert_eq!(count.total(), 24);
        assert_eq!(g.value(c), &[32., 38., 44., 50., 68., 83., 98., 113.]);
    }

    #[test]
    fn causal_attention_single_query_sees_all_keys() {
        let mut g = Graph::new();
        let k = g.constant(&Tensor::matrix(3, 2, vec![1., 0., 0., 1., 1., 1.]).unwrap());
        let v = g.constant(&Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let q_full = g.constant(&Tensor::matrix(3, 2, vec![0.5, -0.5, 0.1, 0.2, 0.3, 0.3]).unwrap());
        let full = g.attention(q_full, k, v, 1, true).unwrap();
        let q_last = g.constant(&Tensor::matrix(1, 2, vec![0.3, 0.3]).unwrap());
        let step = g.attention(q_last, k, v, 1, true).unwrap();
        assert_eq!(g.row(full, 2), g.value(step));
        // First query attends only to the first key.
        assert_eq!(g.row(full, 0), &[1., 2.]);
    }

    #[test]
    fn xent_uniform_is_ln_v() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::matrix(1, 5, vec![0.3; 5]).unwrap());
        for eps in [0.0, 0.2, 0.7] {
            let l = g.xent_smoothed(x, &[2], eps).unwrap();
            assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(g.xent_smoothed(x, &[5], 0.1), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn inference_graph_keeps_no_tape() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let mut g = Graph::inference(&store);
        let x = g.constant(&Tensor::matrix(1, 2, vec![1., 1.]).unwrap());
        let wv = g.param(w);
        let y = g.matmul(x, wv).unwrap();
        let s = g.sum(y);
        assert_eq!(g.scalar(s), 10.0);
        let grads = g.backward(s);
        assert!(grads.get(wv).is_none());
    }
}
