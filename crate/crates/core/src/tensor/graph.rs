use std::borrow::Cow;
use std::sync::Arc;

use super::kernels::{matmul, matmul_at, matmul_bt};
use super::{Gradients, Mat, ParamId, ParamStore, Real};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Silu(Var),
    SwiGlu(Var, Var),
    RmsNorm { x: Var, gain: Var, inv: Vec<F> },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<F>, inv: Vec<F> },
    Rope { x: Var, heads: usize, cos: Vec<F>, sin: Vec<F> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<F> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Im2Col { x: Var, height: usize, width: usize },
    AvgPool2 { x: Var, height: usize, width: usize },
    Upsample2 { x: Var, height: usize, width: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weight: F, probs: Vec<F> },
    SquaredError { pred: Var, target: Mat<F>, weight: F },
}

struct Node<'p, F: Real> {
    value: Cow<'p, Mat<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Reverse-mode tape over matrices.
///
/// Parameters are borrowed from a [`ParamStore`] rather than copied. Each
/// graph is used for one forward pass and at most one backward pass.
pub struct Graph<'p, F: Real> {
    store: &'p ParamStore<F>,
    nodes: Vec<Node<'p, F>>,
    param_vars: Vec<Option<Var>>,
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat<F>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Const, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: Cow::Borrowed(self.store.get(id)), op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p + q).collect();
        let out = Mat::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `a[m,n] + b[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, bias) = (self.value(a), self.value(b));
        assert_eq!((1, x.cols), bias.shape(), "add_row shape mismatch");
        let mut out = x.clone();
        if x.cols > 0 {
            for row in out.data.chunks_mut(x.cols) {
                for (o, &bv) in row.iter_mut().zip(&bias.data) {
                    *o += bv;
                }
            }
        }
        self.push(out, Op::AddRow(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p * q).collect();
        let out = Mat::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::of(s);
        let x = self.value(a);
        let out = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&v| v * s).collect());
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&v| v * sigmoid(v)).collect());
        self.push(out, Op::Silu(a), &[a])
    }

    /// `silu(gate) * up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Var {
        let (g, u) = (self.value(gate), self.value(up));
        assert_eq!(g.shape(), u.shape(), "swiglu shape mismatch");
        let data = g.data.iter().zip(&u.data).map(|(&a, &b)| a * sigmoid(a) * b).collect();
        let out = Mat::from_vec(g.rows, g.cols, data);
        self.push(out, Op::SwiGlu(gate, up), &[gate, up])
    }

    /// Row-wise RMS normalization with a learned `[1, cols]` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let (xv, g) = (self.value(x), self.value(gain));
        assert_eq!((1, xv.cols), g.shape());
        let n = F::of(xv.cols as f64);
        let eps = F::of(eps);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        let mut inv = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<F>() / n;
            let iv = F::one() / (ms + eps).sqrt();
            inv.push(iv);
            for ((o, &v), &gv) in out.row_mut(r).iter_mut().zip(row).zip(&g.data) {
                *o = v * iv * gv;
            }
        }
        self.push(out, Op::RmsNorm { x, gain, inv }, &[x, gain])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!((1, xv.cols), g.shape());
        assert_eq!((1, xv.cols), b.shape());
        let n = F::of(xv.cols as f64);
        let eps = F::of(eps);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        let mut mean = Vec::with_capacity(xv.rows);
        let mut inv = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / n;
            let iv = F::one() / (var + eps).sqrt();
            mean.push(mu);
            inv.push(iv);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[j] - mu) * iv * g.data[j] + b.data[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, mean, inv }, &[x, gain, bias])
    }

    /// Rotary position encoding on interleaved pairs within each head.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, positions.len(), "one position per row");
        assert_eq!(xv.cols % heads, 0);
        let dh = xv.cols / heads;
        assert_eq!(dh % 2, 0, "rotary head dim must be even");
        let half = dh / 2;
        let mut cos = Vec::with_capacity(xv.rows * half);
        let mut sin = Vec::with_capacity(xv.rows * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / dh as f64);
                cos.push(F::of(theta.cos()));
                sin.push(F::of(theta.sin()));
            }
        }
        let mut out = xv.clone();
        for r in 0..xv.rows {
            let row = out.row_mut(r);
            for h in 0..heads {
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let a = row[h * dh + 2 * i];
                    let b = row[h * dh + 2 * i + 1];
                    row[h * dh + 2 * i] = a * c - b * s;
                    row[h * dh + 2 * i + 1] = a * s + b * c;
                }
            }
        }
        self.push(out, Op::Rope { x, heads, cos, sin }, &[x])
    }

    /// Multi-head scaled dot-product attention over `[L, d]` inputs.
    ///
    /// `allow` is a row-major `L x L` matrix (query row, key column); `None`
    /// means every position sees every other. Rows with no allowed keys
    /// produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, allow: Option<&Arc<[bool]>>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = qv.shape();
        assert_eq!(kv.shape(), (l, d));
        assert_eq!(vv.shape(), (l, d));
        assert_eq!(d % heads, 0);
        if let Some(a) = allow {
            assert_eq!(a.len(), l * l, "mask size");
        }
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![F::zero(); heads * l * l];
        let mut out = Mat::zeros(l, d);
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let qi = &qv.data[i * d + off..i * d + off + dh];
                let prow = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                let mut maxv = F::neg_infinity();
                let mut any = false;
                for (j, p) in prow.iter_mut().enumerate() {
                    if allow.is_some_and(|a| !a[i * l + j]) {
                        continue;
                    }
                    let kj = &kv.data[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    *p = s;
                    maxv = maxv.max(s);
                    any = true;
                }
                if !any {
                    continue;
                }
                let mut sum = F::zero();
                for (j, p) in prow.iter_mut().enumerate() {
                    if allow.is_some_and(|a| !a[i * l + j]) {
                        continue;
                    }
                    let e = (*p - maxv).exp();
                    *p = e;
                    sum += e;
                }
                let inv = F::one() / sum;
                let orow = &mut out.data[i * d + off..i * d + off + dh];
                for (j, p) in prow.iter_mut().enumerate() {
                    *p *= inv;
                    if *p == F::zero() {
                        continue;
                    }
                    let vj = &vv.data[j * d + off..j * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += *p * x;
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(idx.len(), xv.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows, y.rows, "concat_cols height mismatch");
        let cols = x.cols + y.cols;
        let mut out = Mat::zeros(x.rows, cols);
        for r in 0..x.rows {
            let row = out.row_mut(r);
            row[..x.cols].copy_from_slice(x.row(r));
            row[x.cols..].copy_from_slice(y.row(r));
        }
        self.push(out, Op::ConcatCols(a, b), &[a, b])
    }

    /// 3x3 zero-padded patch extraction: `[h*w, c] -> [h*w, 9c]`.
    pub fn im2col(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, height * width);
        let c = xv.cols;
        let mut out = Mat::zeros(xv.rows, 9 * c);
        for py in 0..height {
            for px in 0..width {
                let orow = out.row_mut(py * width + px);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (py + ky, px + kx);
                        if sy == 0 || sx == 0 || sy > height || sx > width {
                            continue;
                        }
                        let src = xv.row((sy - 1) * width + (sx - 1));
                        orow[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c].copy_from_slice(src);
                    }
                }
            }
        }
        self.push(out, Op::Im2Col { x, height, width }, &[x])
    }

    /// 2x2 average pooling on a `[h*w, c]` grid.
    pub fn avg_pool2(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, height * width);
        assert!(height % 2 == 0 && width % 2 == 0);
        let (oh, ow, c) = (height / 2, width / 2, xv.cols);
        let quarter = F::of(0.25);
        let mut out = Mat::zeros(oh * ow, c);
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = out.row_mut(oy * ow + ox);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = xv.row((2 * oy + dy) * width + 2 * ox + dx);
                    for (o, &v) in orow.iter_mut().zip(src) {
                        *o += v * quarter;
                    }
                }
            }
        }
        self.push(out, Op::AvgPool2 { x, height, width }, &[x])
    }

    /// Nearest-neighbour 2x upsampling of a `[h*w, c]` grid.
    pub fn upsample2(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, height * width);
        let (oh, ow) = (2 * height, 2 * width);
        let mut out = Mat::zeros(oh * ow, xv.cols);
        for y in 0..oh {
            for xx in 0..ow {
                out.row_mut(y * ow + xx).copy_from_slice(xv.row((y / 2) * width + xx / 2));
            }
        }
        self.push(out, Op::Upsample2 { x, height, width }, &[x])
    }

    /// `weight * sum_r -log softmax(logits_r)[targets_r]`, a `[1,1]` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weight: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let weight = F::of(weight);
        let mut probs = vec![F::zero(); lv.len()];
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            assert!(t < row.len(), "target out of vocabulary");
            let maxv = row.iter().copied().fold(F::neg_infinity(), F::max);
            let prow = &mut probs[r * lv.cols..(r + 1) * lv.cols];
            let mut sum = F::zero();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - maxv).exp();
                sum += *p;
            }
            for p in prow.iter_mut() {
                *p = *p / sum;
            }
            total += sum.ln() + maxv - row[t];
        }
        let out = Mat::scalar(total * weight);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), weight, probs }, &[logits])
    }

    /// `weight * sum (pred - target)^2`, a `[1,1]` node.
    pub fn squared_error(&mut self, pred: Var, target: Mat<F>, weight: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len(), "squared_error size mismatch");
        let weight = F::of(weight);
        let total = pv.data.iter().zip(&target.data).map(|(&p, &t)| (p - t) * (p - t)).sum::<F>();
        let out = Mat::scalar(total * weight);
        self.push(out, Op::SquaredError { pred, target, weight }, &[pred])
    }

    /// Back-propagates from a `[1,1]` node and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Mat<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(F::one()));
        let mut out = self.store.zeros_like();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<'p, F>, g: Mat<F>, grads: &mut [Option<Mat<F>>], out: &mut Gradients<F>) {
        let acc = |grads: &mut [Option<Mat<F>>], v: Var, m: Mat<F>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        match &node.op {
            Op::Const => {}
            Op::Param(id) => out.grads[id.0].add_assign(&g),
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, matmul_bt(&g, self.value(*b)));
                }
                if self.wants(*b) {
                    acc(grads, *b, matmul_at(self.value(*a), &g));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g);
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*b) {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, &v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, db);
                }
                if self.wants(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data.iter().zip(&y.data).map(|(&gv, &yv)| gv * yv).collect();
                    acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
                }
                if self.wants(*b) {
                    let d = g.data.iter().zip(&x.data).map(|(&gv, &xv)| gv * xv).collect();
                    acc(grads, *b, Mat::from_vec(g.rows, g.cols, d));
                }
            }
            Op::Scale(a, s) => {
                let mut d = g;
                d.scale(*s);
                acc(grads, *a, d);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * s * (F::one() + xv * (F::one() - s))
                    })
                    .collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::SwiGlu(gate, up) => {
                let (a, b) = (self.value(*gate), self.value(*up));
                if self.wants(*gate) {
                    let d = (0..g.len())
                        .map(|i| {
                            let s = sigmoid(a.data[i]);
                            g.data[i] * b.data[i] * s * (F::one() + a.data[i] * (F::one() - s))
                        })
                        .collect();
                    acc(grads, *gate, Mat::from_vec(g.rows, g.cols, d));
                }
                if self.wants(*up) {
                    let d = (0..g.len()).map(|i| g.data[i] * a.data[i] * sigmoid(a.data[i])).collect();
                    acc(grads, *up, Mat::from_vec(g.rows, g.cols, d));
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let n = F::of(xv.cols as f64);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let mut dg = Mat::zeros(1, xv.cols);
                for r in 0..xv.rows {
                    let (row, grow, iv) = (xv.row(r), g.row(r), inv[r]);
                    let mut dot = F::zero();
                    for j in 0..xv.cols {
                        let xh = row[j] * iv;
                        dg.data[j] += grow[j] * xh;
                        dot += grow[j] * gv.data[j] * xh;
                    }
                    let mean_dot = dot / n;
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        let xh = row[j] * iv;
                        *d = iv * (grow[j] * gv.data[j] - xh * mean_dot);
                    }
                }
                if self.wants(*gain) {
                    acc(grads, *gain, dg);
                }
                if self.wants(*x) {
                    acc(grads, *x, dx);
                }
            }
            Op::LayerNorm { x, gain, bias, mean, inv } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let n = F::of(xv.cols as f64);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let mut dg = Mat::zeros(1, xv.cols);
                let mut db = Mat::zeros(1, xv.cols);
                for r in 0..xv.rows {
                    let (row, grow, mu, iv) = (xv.row(r), g.row(r), mean[r], inv[r]);
                    let mut sum_d = F::zero();
                    let mut sum_dx = F::zero();
                    for j in 0..xv.cols {
                        let xh = (row[j] - mu) * iv;
                        dg.data[j] += grow[j] * xh;
                        db.data[j] += grow[j];
                        let dxh = grow[j] * gv.data[j];
                        sum_d += dxh;
                        sum_dx += dxh * xh;
                    }
                    let (md, mdx) = (sum_d / n, sum_dx / n);
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        let xh = (row[j] - mu) * iv;
                        *d = iv * (grow[j] * gv.data[j] - md - xh * mdx);
                    }
                }
                if self.wants(*gain) {
                    acc(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    acc(grads, *bias, db);
                }
                if self.wants(*x) {
                    acc(grads, *x, dx);
                }
            }
            Op::Rope { x, heads, cos, sin } => {
                let dh = g.cols / heads;
                let half = dh / 2;
                let mut dx = g;
                for r in 0..dx.rows {
                    let row = dx.row_mut(r);
                    for h in 0..*heads {
                        for i in 0..half {
                            let (c, s) = (cos[r * half + i], sin[r * half + i]);
                            let g0 = row[h * dh + 2 * i];
                            let g1 = row[h * dh + 2 * i + 1];
                            row[h * dh + 2 * i] = g0 * c + g1 * s;
                            row[h * dh + 2 * i + 1] = -g0 * s + g1 * c;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (l, d) = qv.shape();
                let dh = d / heads;
                let scale = F::of(1.0 / (dh as f64).sqrt());
                let mut dq = Mat::zeros(l, d);
                let mut dk = Mat::zeros(l, d);
                let mut dv = Mat::zeros(l, d);
                let mut dp = vec![F::zero(); l];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..l {
                        let prow = &probs[(h * l + i) * l..(h * l + i + 1) * l];
                        let gi = &g.data[i * d + off..i * d + off + dh];
                        let mut s = F::zero();
                        for j in 0..l {
                            if prow[j] == F::zero() {
                                dp[j] = F::zero();
                                continue;
                            }
                            let vj = &vv.data[j * d + off..j * d + off + dh];
                            dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<F>();
                            s += prow[j] * dp[j];
                            let dvj = &mut dv.data[j * d + off..j * d + off + dh];
                            for (o, &gv) in dvj.iter_mut().zip(gi) {
                                *o += prow[j] * gv;
                            }
                        }
                        let qi = &qv.data[i * d + off..i * d + off + dh];
                        for j in 0..l {
                            if prow[j] == F::zero() {
                                continue;
                            }
                            let ds = prow[j] * (dp[j] - s) * scale;
                            let kj = &kv.data[j * d + off..j * d + off + dh];
                            let dqi = &mut dq.data[i * d + off..i * d + off + dh];
                            for (o, &kvv) in dqi.iter_mut().zip(kj) {
                                *o += ds * kvv;
                            }
                            let dkj = &mut dk.data[j * d + off..j * d + off + dh];
                            for (o, &qvv) in dkj.iter_mut().zip(qi) {
                                *o += ds * qvv;
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    acc(grads, *q, dq);
                }
                if self.wants(*k) {
                    acc(grads, *k, dk);
                }
                if self.wants(*v) {
                    acc(grads, *v, dv);
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &gv) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.wants(p) {
                        let slice = g.data[start * g.cols..(start + rows) * g.cols].to_vec();
                        acc(grads, p, Mat::from_vec(rows, g.cols, slice));
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols;
                let cb = g.cols - ca;
                if self.wants(*a) {
                    let mut da = Mat::zeros(g.rows, ca);
                    for r in 0..g.rows {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    }
                    acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Mat::zeros(g.rows, cb);
                    for r in 0..g.rows {
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Im2Col { x, height, width } => {
                let c = self.value(*x).cols;
                let (height, width) = (*height, *width);
                let mut dx = Mat::zeros(height * width, c);
                for py in 0..height {
                    for px in 0..width {
                        let grow = g.row(py * width + px);
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (py + ky, px + kx);
                                if sy == 0 || sx == 0 || sy > height || sx > width {
                                    continue;
                                }
                                let dst = dx.row_mut((sy - 1) * width + (sx - 1));
                                let src = &grow[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                                for (o, &v) in dst.iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::AvgPool2 { x, height, width } => {
                let c = g.cols;
                let (oh, ow) = (height / 2, width / 2);
                let quarter = F::of(0.25);
                let mut dx = Mat::zeros(height * width, c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = g.row(oy * ow + ox).to_vec();
                        for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let dst = dx.row_mut((2 * oy + dy) * width + 2 * ox + ddx);
                            for (o, &v) in dst.iter_mut().zip(&grow) {
                                *o += v * quarter;
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Upsample2 { x, height, width } => {
                let (ow, oh) = (2 * width, 2 * height);
                let mut dx = Mat::zeros(height * width, g.cols);
                for y in 0..oh {
                    for xx in 0..ow {
                        let src = g.row(y * ow + xx);
                        let dst = dx.row_mut((y / 2) * width + xx / 2);
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, weight, probs } => {
                let lv = self.value(*logits);
                let scale = g.data[0] * *weight;
                let mut dl = Mat::from_vec(lv.rows, lv.cols, probs.clone());
                for (r, &t) in targets.iter().enumerate() {
                    dl.data[r * lv.cols + t] -= F::one();
                }
                dl.scale(scale);
                acc(grads, *logits, dl);
            }
            Op::SquaredError { pred, target, weight } => {
                let pv = self.value(*pred);
                let scale = g.data[0] * *weight * F::of(2.0);
                let d = pv.data.iter().zip(&target.data).map(|(&p, &t)| (p - t) * scale).collect();
                acc(grads, *pred, Mat::from_vec(pv.rows, pv.cols, d));
            }
        }
    }
}
