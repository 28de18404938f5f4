//! Reverse-mode autodiff on a flat tape of 2-D tensors.
//!
//! Each op records its inputs plus whatever forward context its backward
//! needs. Gradients only propagate into subtrees that contain a parameter
//! node, so frozen-weight passes skip the expensive dW products.

use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node(usize);

pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
}

enum Op<T: Scalar> {
    Leaf,
    /// out[r] = src[idx[r]]
    GatherRows { src: Node, idx: Vec<usize> },
    MatMul { a: Node, b: Node },
    Add { a: Node, b: Node },
    Sub { a: Node, b: Node },
    /// broadcast a [1 x n] bias over every row of a
    AddRow { a: Node, bias: Node },
    Scale { a: Node, c: T },
    AddConst { a: Node },
    MulElem { a: Node, b: Node },
    ConcatRows { a: Node, b: Node },
    SliceCols { a: Node, start: usize },
    Reshape { a: Node },
    LayerNorm { x: Node, gain: Node, bias: Node, mean: Vec<T>, inv_std: Vec<T> },
    Gelu { x: Node },
    /// q: [t x e], k/v: [(p+t) x e]; query i attends keys 0..=p+i.
    /// `attn` holds softmax weights per head, laid out head-major.
    CausalAttention { q: Node, k: Node, v: Node, heads: usize, key_offset: usize, attn: Vec<T> },
    LogSoftmaxRows { x: Node },
    /// out[0][r] = x[r][cols[r]]
    PickPerRow { x: Node, cols: Vec<usize> },
    SumAll { x: Node },
    SquareSum { x: Node },
    SqrtScalar { x: Node },
    LnScalar { x: Node },
    StackScalars { xs: Vec<Node> },
    SoftmaxVec { x: Node },
    SumQLogQ { q: Node },
    Pick { x: Node, index: usize },
    /// max(margin - x, 0)^2 on a scalar
    HingeSq { x: Node, margin: T },
    LogSumExpVec { x: Node },
    /// out = sum_i weights[i] * mats[i]
    Mix { weights: Node, mats: Vec<Node> },
    Dot { a: Node, b: Node },
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), needs_grad: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Node {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Node(self.values.len() - 1)
    }

    pub fn value(&self, n: Node) -> &Tensor<T> {
        &self.values[n.0]
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Node {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Node {
        self.push(t, Op::Leaf, true)
    }

    fn ng(&self, n: Node) -> bool {
        self.needs_grad[n.0]
    }

    pub fn gather_rows(&mut self, src: Node, idx: Vec<usize>) -> Node {
        let s = &self.values[src.0];
        let cols = s.cols();
        let mut out = Tensor::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        let ng = self.ng(src);
        self.push(out, Op::GatherRows { src, idx }, ng)
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Node {
        let out = matmul_nn(&self.values[a.0], &self.values[b.0]);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b }, ng)
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let mut out = x.clone();
        out.add_assign(y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Node {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let mut out = x.clone();
        for (o, v) in out.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *o -= *v;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub { a, b }, ng)
    }

    pub fn add_row(&mut self, a: Node, bias: Node) -> Node {
        let (x, b) = (&self.values[a.0], &self.values[bias.0]);
        assert_eq!(b.rows(), 1);
        assert_eq!(x.cols(), b.cols(), "bias width mismatch");
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(b.row(0)) {
                *o += *v;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRow { a, bias }, ng)
    }

    pub fn scale(&mut self, a: Node, c: T) -> Node {
        let mut out = self.values[a.0].clone();
        out.scale_assign(c);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    /// Add a non-differentiable tensor (noise, fixed offsets).
    pub fn add_const(&mut self, a: Node, c: &Tensor<T>) -> Node {
        let x = &self.values[a.0];
        assert_eq!(x.shape(), c.shape());
        let mut out = x.clone();
        out.add_assign(c);
        let ng = self.ng(a);
        self.push(out, Op::AddConst { a }, ng)
    }

    pub fn mul_elem(&mut self, a: Node, b: Node) -> Node {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(x.shape(), y.shape());
        let mut out = x.clone();
        for (o, v) in out.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *o *= *v;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MulElem { a, b }, ng)
    }

    pub fn concat_rows(&mut self, a: Node, b: Node) -> Node {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(x.cols(), y.cols(), "concat_rows width mismatch");
        let mut data = Vec::with_capacity(x.len() + y.len());
        data.extend_from_slice(x.as_slice());
        data.extend_from_slice(y.as_slice());
        let out = Tensor::from_vec(x.rows() + y.rows(), x.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatRows { a, b }, ng)
    }

    pub fn reshape(&mut self, a: Node, rows: usize, cols: usize) -> Node {
        let out = self.values[a.0].reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(out, Op::Reshape { a }, ng)
    }

    pub fn slice_cols(&mut self, a: Node, start: usize, len: usize) -> Node {
        let x = &self.values[a.0];
        assert!(start + len <= x.cols());
        let mut out = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn layer_norm(&mut self, x: Node, gain: Node, bias: Node) -> Node {
        let xv = &self.values[x.0];
        let g = &self.values[gain.0];
        let b = &self.values[bias.0];
        let n = xv.cols();
        assert_eq!(g.cols(), n);
        assert_eq!(b.cols(), n);
        let eps = T::from_f64(1e-5);
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut out = Tensor::zeros(xv.rows(), n);
        let mut means = Vec::with_capacity(xv.rows());
        let mut inv_stds = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mut mean = T::zero();
            for v in row {
                mean += *v;
            }
            mean *= inv_n;
            let mut var = T::zero();
            for v in row {
                let d = *v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = (var + eps).sqrt().recip();
            let orow = out.row_mut(r);
            for j in 0..n {
                orow[j] = (row[j] - mean) * inv_std * g.row(0)[j] + b.row(0)[j];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, mean: means, inv_std: inv_stds }, ng)
    }

    pub fn gelu(&mut self, x: Node) -> Node {
        let mut out = self.values[x.0].clone();
        for v in out.as_mut_slice() {
            *v = gelu_scalar(*v);
        }
        let ng = self.ng(x);
        self.push(out, Op::Gelu { x }, ng)
    }

    pub fn causal_attention(&mut self, q: Node, k: Node, v: Node, heads: usize, key_offset: usize) -> Node {
        let qv = &self.values[q.0];
        let kv = &self.values[k.0];
        let vv = &self.values[v.0];
        let t = qv.rows();
        let s = kv.rows();
        let e = qv.cols();
        assert_eq!(kv.cols(), e);
        assert_eq!(vv.shape(), kv.shape());
        assert_eq!(s, key_offset + t, "key rows must equal key_offset + query rows");
        assert_eq!(e % heads, 0);
        let hd = e / heads;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut out = Tensor::zeros(t, e);
        let mut attn = vec![T::zero(); heads * t * s];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..t {
                let limit = key_offset + i + 1;
                let qrow = &qv.row(i)[off..off + hd];
                let arow = &mut attn[(h * t + i) * s..(h * t + i) * s + s];
                let mut maxv = T::neg_infinity();
                for j in 0..limit {
                    let krow = &kv.row(j)[off..off + hd];
                    let mut dot = T::zero();
                    for (a, b) in qrow.iter().zip(krow) {
                        dot += *a * *b;
                    }
                    let logit = dot * scale;
                    arow[j] = logit;
                    if logit > maxv {
                        maxv = logit;
                    }
                }
                let mut denom = T::zero();
                for a in arow.iter_mut().take(limit) {
                    *a = (*a - maxv).exp();
                    denom += *a;
                }
                let inv = denom.recip();
                for a in arow.iter_mut().take(limit) {
                    *a *= inv;
                }
                let orow = &mut out.row_mut(i)[off..off + hd];
                for j in 0..limit {
                    let w = arow[j];
                    let vrow = &vv.row(j)[off..off + hd];
                    for (o, val) in orow.iter_mut().zip(vrow) {
                        *o += w * *val;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::CausalAttention { q, k, v, heads, key_offset, attn }, ng)
    }

    pub fn log_softmax_rows(&mut self, x: Node) -> Node {
        let xv = &self.values[x.0];
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mut maxv = T::neg_infinity();
            for v in row {
                if *v > maxv {
                    maxv = *v;
                }
            }
            let mut denom = T::zero();
            for v in row {
                denom += (*v - maxv).exp();
            }
            let lse = maxv + denom.ln();
            let orow = out.row_mut(r);
            for (o, v) in orow.iter_mut().zip(row) {
                *o = *v - lse;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmaxRows { x }, ng)
    }

    pub fn pick_per_row(&mut self, x: Node, cols: Vec<usize>) -> Node {
        let xv = &self.values[x.0];
        assert_eq!(cols.len(), xv.rows());
        let data: Vec<T> = cols.iter().enumerate().map(|(r, &c)| xv.at(r, c)).collect();
        let out = Tensor::from_vec(1, cols.len(), data);
        let ng = self.ng(x);
        self.push(out, Op::PickPerRow { x, cols }, ng)
    }

    pub fn sum_all(&mut self, x: Node) -> Node {
        let mut acc = T::zero();
        for v in self.values[x.0].as_slice() {
            acc += *v;
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(1, 1, vec![acc]), Op::SumAll { x }, ng)
    }

    pub fn mean_all(&mut self, x: Node) -> Node {
        let n = self.values[x.0].len();
        let s = self.sum_all(x);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    pub fn square_sum(&mut self, x: Node) -> Node {
        let mut acc = T::zero();
        for v in self.values[x.0].as_slice() {
            acc += *v * *v;
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(1, 1, vec![acc]), Op::SquareSum { x }, ng)
    }

    pub fn sqrt_scalar(&mut self, x: Node) -> Node {
        let v = self.values[x.0].scalar();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(1, 1, vec![v.sqrt()]), Op::SqrtScalar { x }, ng)
    }

    pub fn ln_scalar(&mut self, x: Node) -> Node {
        let v = self.values[x.0].scalar();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(1, 1, vec![v.ln()]), Op::LnScalar { x }, ng)
    }

    pub fn stack_scalars(&mut self, xs: Vec<Node>) -> Node {
        let data: Vec<T> = xs.iter().map(|n| self.values[n.0].scalar()).collect();
        let ng = xs.iter().any(|n| self.ng(*n));
        self.push(Tensor::from_vec(1, data.len(), data), Op::StackScalars { xs }, ng)
    }

    pub fn softmax_vec(&mut self, x: Node) -> Node {
        let xv = &self.values[x.0];
        assert_eq!(xv.rows(), 1);
        let row = xv.row(0);
        let mut maxv = T::neg_infinity();
        for v in row {
            if *v > maxv {
                maxv = *v;
            }
        }
        let mut data: Vec<T> = row.iter().map(|v| (*v - maxv).exp()).collect();
        let mut denom = T::zero();
        for v in &data {
            denom += *v;
        }
        let inv = denom.recip();
        for v in data.iter_mut() {
            *v *= inv;
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(1, row.len(), data), Op::SoftmaxVec { x }, ng)
    }

    /// sum_i q_i ln q_i with 0 ln 0 := 0.
    pub fn sum_q_log_q(&mut self, q: Node) -> Node {
        let mut acc = T::zero();
        for v in self.values[q.0].as_slice() {
            if *v > T::zero() {
                acc += *v * v.ln();
            }
        }
        let ng = self.ng(q);
        self.push(Tensor::from_vec(1, 1, vec![acc]), Op::SumQLogQ { q }, ng)
    }

    pub fn pick(&mut self, x: Node, index: usize) -> Node {
        let v = self.values[x.0].as_slice()[index];
        let ng = self.ng(x);
        self.push(Tensor::from_vec(1, 1, vec![v]), Op::Pick { x, index }, ng)
    }

    pub fn hinge_sq(&mut self, x: Node, margin: T) -> Node {
        let v = self.values[x.0].scalar();
        let slack = (margin - v).max(T::zero());
        let ng = self.ng(x);
        self.push(Tensor::from_vec(1, 1, vec![slack * slack]), Op::HingeSq { x, margin }, ng)
    }

    pub fn log_sum_exp_vec(&mut self, x: Node) -> Node {
        let xv = &self.values[x.0];
        assert_eq!(xv.rows(), 1);
        let row = xv.row(0);
        let mut maxv = T::neg_infinity();
        for v in row {
            if *v > maxv {
                maxv = *v;
            }
        }
        let mut denom = T::zero();
        for v in row {
            denom += (*v - maxv).exp();
        }
        let out = maxv + denom.ln();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(1, 1, vec![out]), Op::LogSumExpVec { x }, ng)
    }

    /// Convex mixture of same-shape tensors with weights from a [1 x n] node.
    pub fn mix(&mut self, weights: Node, mats: Vec<Node>) -> Node {
        let w = self.values[weights.0].clone();
        assert_eq!(w.rows(), 1);
        assert_eq!(w.cols(), mats.len());
        assert!(!mats.is_empty());
        let shape = self.values[mats[0].0].shape();
        let mut out = Tensor::zeros(shape.0, shape.1);
        for (i, m) in mats.iter().enumerate() {
            let mv = &self.values[m.0];
            assert_eq!(mv.shape(), shape);
            let wi = w.row(0)[i];
            for (o, v) in out.as_mut_slice().iter_mut().zip(mv.as_slice()) {
                *o += wi * *v;
            }
        }
        let ng = self.ng(weights) || mats.iter().any(|m| self.ng(*m));
        self.push(out, Op::Mix { weights, mats }, ng)
    }

    pub fn dot(&mut self, a: Node, b: Node) -> Node {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(x.shape(), y.shape());
        let mut acc = T::zero();
        for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
            acc += *p * *q;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(1, 1, vec![acc]), Op::Dot { a, b }, ng)
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; index by
    /// the `Node` handles you kept for parameters.
    pub fn backward(&mut self, loss: Node) -> Gradients<T> {
        assert_eq!(self.values[loss.0].len(), 1, "backward needs a scalar loss");
        let n = self.values.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![T::one()]));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.needs_grad[i] {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(grads: &mut [Option<Tensor<T>>], node: Node, delta: Tensor<T>) {
        match &mut grads[node.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::AddConst { a } => {
                if self.ng(*a) {
                    Self::accum(grads, *a, g.clone());
                }
            }
            Op::GatherRows { src, idx } => {
                if self.ng(*src) {
                    let s = &self.values[src.0];
                    let mut d = Tensor::zeros(s.rows(), s.cols());
                    for (r, &ix) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(ix).iter_mut().zip(g.row(r)) {
                            *o += *v;
                        }
                    }
                    Self::accum(grads, *src, d);
                }
            }
            Op::MatMul { a, b } => {
                if self.ng(*a) {
                    let d = matmul_nt(g, &self.values[b.0]);
                    Self::accum(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = matmul_tn(&self.values[a.0], g);
                    Self::accum(grads, *b, d);
                }
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    Self::accum(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    Self::accum(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.ng(*a) {
                    Self::accum(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    let mut d = g.clone();
                    d.scale_assign(-T::one());
                    Self::accum(grads, *b, d);
                }
            }
            Op::AddRow { a, bias } => {
                if self.ng(*a) {
                    Self::accum(grads, *a, g.clone());
                }
                if self.ng(*bias) {
                    let mut d = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in d.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += *v;
                        }
                    }
                    Self::accum(grads, *bias, d);
                }
            }
            Op::Scale { a, c } => {
                if self.ng(*a) {
                    let mut d = g.clone();
                    d.scale_assign(*c);
                    Self::accum(grads, *a, d);
                }
            }
            Op::MulElem { a, b } => {
                if self.ng(*a) {
                    let mut d = g.clone();
                    for (o, v) in d.as_mut_slice().iter_mut().zip(self.values[b.0].as_slice()) {
                        *o *= *v;
                    }
                    Self::accum(grads, *a, d);
                }
                if self.ng(*b) {
                    let mut d = g.clone();
                    for (o, v) in d.as_mut_slice().iter_mut().zip(self.values[a.0].as_slice()) {
                        *o *= *v;
                    }
                    Self::accum(grads, *b, d);
                }
            }
            Op::ConcatRows { a, b } => {
                let ra = self.values[a.0].rows();
                let cols = g.cols();
                if self.ng(*a) {
                    let d = Tensor::from_vec(ra, cols, g.as_slice()[..ra * cols].to_vec());
                    Self::accum(grads, *a, d);
                }
                if self.ng(*b) {
                    let rb = self.values[b.0].rows();
                    let d = Tensor::from_vec(rb, cols, g.as_slice()[ra * cols..].to_vec());
                    Self::accum(grads, *b, d);
                }
            }
            Op::Reshape { a } => {
                if self.ng(*a) {
                    let shape = self.values[a.0].shape();
                    Self::accum(grads, *a, g.reshaped(shape.0, shape.1));
                }
            }
            Op::SliceCols { a, start } => {
                if self.ng(*a) {
                    let src = &self.values[a.0];
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        let drow = &mut d.row_mut(r)[*start..*start + g.cols()];
                        drow.copy_from_slice(g.row(r));
                    }
                    Self::accum(grads, *a, d);
                }
            }
            Op::LayerNorm { x, gain, bias, mean, inv_std } => {
                let xv = &self.values[x.0];
                let gv = &self.values[gain.0];
                let n = xv.cols();
                let inv_n = T::from_f64(1.0 / n as f64);
                if self.ng(*x) {
                    let mut d = Tensor::zeros(xv.rows(), n);
                    for r in 0..xv.rows() {
                        let xrow = xv.row(r);
                        let grow = g.row(r);
                        let m = mean[r];
                        let is = inv_std[r];
                        // dy/dxhat = g * gain; then standard layer-norm backward
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        let mut dxhat = vec![T::zero(); n];
                        for j in 0..n {
                            let xh = (xrow[j] - m) * is;
                            let dh = grow[j] * gv.row(0)[j];
                            dxhat[j] = dh;
                            sum_dxhat += dh;
                            sum_dxhat_xhat += dh * xh;
                        }
                        let drow = d.row_mut(r);
                        for j in 0..n {
                            let xh = (xrow[j] - m) * is;
                            drow[j] =
                                is * (dxhat[j] - inv_n * sum_dxhat - xh * inv_n * sum_dxhat_xhat);
                        }
                    }
                    Self::accum(grads, *x, d);
                }
                if self.ng(*gain) {
                    let mut d = Tensor::zeros(1, n);
                    for r in 0..xv.rows() {
                        let xrow = xv.row(r);
                        let grow = g.row(r);
                        let m = mean[r];
                        let is = inv_std[r];
                        for j in 0..n {
                            d.row_mut(0)[j] += grow[j] * (xrow[j] - m) * is;
                        }
                    }
                    Self::accum(grads, *gain, d);
                }
                if self.ng(*bias) {
                    let mut d = Tensor::zeros(1, n);
                    for r in 0..g.rows() {
                        for (o, v) in d.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += *v;
                        }
                    }
                    Self::accum(grads, *bias, d);
                }
            }
            Op::Gelu { x } => {
                if self.ng(*x) {
                    let mut d = g.clone();
                    for (o, v) in d.as_mut_slice().iter_mut().zip(self.values[x.0].as_slice()) {
                        *o *= gelu_bwd(*v);
                    }
                    Self::accum(grads, *x, d);
                }
            }
            Op::CausalAttention { q, k, v, heads, key_offset, attn } => {
                let qv = &self.values[q.0];
                let kv = &self.values[k.0];
                let vv = &self.values[v.0];
                let t = qv.rows();
                let s = kv.rows();
                let e = qv.cols();
                let hd = e / heads;
                let scale = T::from_f64(1.0 / (hd as f64).sqrt());
                let want_q = self.ng(*q);
                let want_k = self.ng(*k);
                let want_v = self.ng(*v);
                let mut dq = if want_q { Some(Tensor::zeros(t, e)) } else { None };
                let mut dk = if want_k { Some(Tensor::zeros(s, e)) } else { None };
                let mut dv = if want_v { Some(Tensor::zeros(s, e)) } else { None };
                for h in 0..*heads {
                    let off = h * hd;
                    for i in 0..t {
                        let limit = key_offset + i + 1;
                        let arow = &attn[(h * t + i) * s..(h * t + i) * s + s];
                        let grow = &g.row(i)[off..off + hd];
                        // d_attn[j] = <g_row, v_j>
                        let mut d_attn = vec![T::zero(); limit];
                        for (j, da) in d_attn.iter_mut().enumerate() {
                            let vrow = &vv.row(j)[off..off + hd];
                            let mut acc = T::zero();
                            for (a, b) in grow.iter().zip(vrow) {
                                acc += *a * *b;
                            }
                            *da = acc;
                        }
                        if let Some(dvt) = dv.as_mut() {
                            for j in 0..limit {
                                let w = arow[j];
                                let drow = &mut dvt.row_mut(j)[off..off + hd];
                                for (o, val) in drow.iter_mut().zip(grow) {
                                    *o += w * *val;
                                }
                            }
                        }
                        if want_q || want_k {
                            // softmax backward
                            let mut dot = T::zero();
                            for j in 0..limit {
                                dot += arow[j] * d_attn[j];
                            }
                            for (j, da) in d_attn.iter_mut().enumerate() {
                                *da = arow[j] * (*da - dot) * scale;
                            }
                            if let Some(dqt) = dq.as_mut() {
                                let drow = &mut dqt.row_mut(i)[off..off + hd];
                                for (j, da) in d_attn.iter().enumerate() {
                                    let krow = &kv.row(j)[off..off + hd];
                                    for (o, val) in drow.iter_mut().zip(krow) {
                                        *o += *da * *val;
                                    }
                                }
                            }
                            if let Some(dkt) = dk.as_mut() {
                                let qrow = &qv.row(i)[off..off + hd];
                                for (j, da) in d_attn.iter().enumerate() {
                                    let drow = &mut dkt.row_mut(j)[off..off + hd];
                                    for (o, val) in drow.iter_mut().zip(qrow) {
                                        *o += *da * *val;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(d) = dq {
                    Self::accum(grads, *q, d);
                }
                if let Some(d) = dk {
                    Self::accum(grads, *k, d);
                }
                if let Some(d) = dv {
                    Self::accum(grads, *v, d);
                }
            }
            Op::LogSoftmaxRows { x } => {
                if self.ng(*x) {
                    let out = &self.values[i];
                    let mut d = g.clone();
                    for r in 0..out.rows() {
                        let mut gsum = T::zero();
                        for v in g.row(r) {
                            gsum += *v;
                        }
                        let orow = out.row(r);
                        let drow = d.row_mut(r);
                        for j in 0..orow.len() {
                            drow[j] -= orow[j].exp() * gsum;
                        }
                    }
                    Self::accum(grads, *x, d);
                }
            }
            Op::PickPerRow { x, cols } => {
                if self.ng(*x) {
                    let xv = &self.values[x.0];
                    let mut d = Tensor::zeros(xv.rows(), xv.cols());
                    for (r, &c) in cols.iter().enumerate() {
                        d.set(r, c, g.row(0)[r]);
                    }
                    Self::accum(grads, *x, d);
                }
            }
            Op::SumAll { x } => {
                if self.ng(*x) {
                    let xv = &self.values[x.0];
                    let d = Tensor::full(xv.rows(), xv.cols(), g.scalar());
                    Self::accum(grads, *x, d);
                }
            }
            Op::SquareSum { x } => {
                if self.ng(*x) {
                    let two = T::from_f64(2.0);
                    let gs = g.scalar();
                    let mut d = self.values[x.0].clone();
                    d.scale_assign(two * gs);
                    Self::accum(grads, *x, d);
                }
            }
            Op::SqrtScalar { x } => {
                if self.ng(*x) {
                    let y = self.values[i].scalar();
                    let floor = T::from_f64(1e-12);
                    let denom = (y + y).max(floor);
                    let d = Tensor::from_vec(1, 1, vec![g.scalar() / denom]);
                    Self::accum(grads, *x, d);
                }
            }
            Op::LnScalar { x } => {
                if self.ng(*x) {
                    let v = self.values[x.0].scalar();
                    let d = Tensor::from_vec(1, 1, vec![g.scalar() / v]);
                    Self::accum(grads, *x, d);
                }
            }
            Op::StackScalars { xs } => {
                for (j, n) in xs.iter().enumerate() {
                    if self.ng(*n) {
                        let d = Tensor::from_vec(1, 1, vec![g.row(0)[j]]);
                        Self::accum(grads, *n, d);
                    }
                }
            }
            Op::SoftmaxVec { x } => {
                if self.ng(*x) {
                    let out = &self.values[i];
                    let mut dot = T::zero();
                    for (a, b) in out.as_slice().iter().zip(g.as_slice()) {
                        dot += *a * *b;
                    }
                    let mut d = Tensor::zeros(1, out.cols());
                    for j in 0..out.cols() {
                        d.row_mut(0)[j] = out.row(0)[j] * (g.row(0)[j] - dot);
                    }
                    Self::accum(grads, *x, d);
                }
            }
            Op::SumQLogQ { q } => {
                if self.ng(*q) {
                    let gs = g.scalar();
                    let qv = &self.values[q.0];
                    let mut d = Tensor::zeros(1, qv.cols());
                    for j in 0..qv.cols() {
                        let v = qv.row(0)[j];
                        // derivative ln q + 1; clamp at q -> 0 where the term vanishes
                        let dj = if v > T::zero() { v.ln() + T::one() } else { T::one() };
                        d.row_mut(0)[j] = gs * dj;
                    }
                    Self::accum(grads, *q, d);
                }
            }
            Op::Pick { x, index } => {
                if self.ng(*x) {
                    let xv = &self.values[x.0];
                    let mut d = Tensor::zeros(xv.rows(), xv.cols());
                    d.as_mut_slice()[*index] = g.scalar();
                    Self::accum(grads, *x, d);
                }
            }
            Op::HingeSq { x, margin } => {
                if self.ng(*x) {
                    let v = self.values[x.0].scalar();
                    let slack = (*margin - v).max(T::zero());
                    let two = T::from_f64(2.0);
                    let d = Tensor::from_vec(1, 1, vec![-two * slack * g.scalar()]);
                    Self::accum(grads, *x, d);
                }
            }
            Op::LogSumExpVec { x } => {
                if self.ng(*x) {
                    let xv = &self.values[x.0];
                    let lse = self.values[i].scalar();
                    let gs = g.scalar();
                    let mut d = Tensor::zeros(1, xv.cols());
                    for j in 0..xv.cols() {
                        d.row_mut(0)[j] = gs * (xv.row(0)[j] - lse).exp();
                    }
                    Self::accum(grads, *x, d);
                }
            }
            Op::Mix { weights, mats } => {
                let w = &self.values[weights.0];
                if self.ng(*weights) {
                    let mut d = Tensor::zeros(1, mats.len());
                    for (j, m) in mats.iter().enumerate() {
                        let mv = &self.values[m.0];
                        let mut acc = T::zero();
                        for (a, b) in mv.as_slice().iter().zip(g.as_slice()) {
                            acc += *a * *b;
                        }
                        d.row_mut(0)[j] = acc;
                    }
                    Self::accum(grads, *weights, d);
                }
                for (j, m) in mats.iter().enumerate() {
                    if self.ng(*m) {
                        let mut d = g.clone();
                        d.scale_assign(w.row(0)[j]);
                        Self::accum(grads, *m, d);
                    }
                }
            }
            Op::Dot { a, b } => {
                let gs = g.scalar();
                if self.ng(*a) {
                    let mut d = self.values[b.0].clone();
                    d.scale_assign(gs);
                    Self::accum(grads, *a, d);
                }
                if self.ng(*b) {
                    let mut d = self.values[a.0].clone();
                    d.scale_assign(gs);
                    Self::accum(grads, *b, d);
                }
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, n: Node) -> Option<&Tensor<T>> {
        self.grads[n.0].as_ref()
    }

    /// Gradient of a parameter node, zeros if the loss never touched it.
    pub fn of(&self, n: Node, rows: usize, cols: usize) -> Tensor<T> {
        match &self.grads[n.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

/// GELU (tanh approximation), shared with the inference forward path.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Central finite differences on an arbitrary scalar-valued graph builder.
    fn fd_check<F>(build: F, inputs: &[Tensor<f64>], tol: f64)
    where
        F: Fn(&mut Graph<f64>, &[Node]) -> Node,
    {
        let eps = 1e-6;
        let mut g = Graph::new();
        let nodes: Vec<Node> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &nodes);
        let grads = g.backward(loss);
        for (pi, input) in inputs.iter().enumerate() {
            let analytic = grads.of(nodes[pi], input.rows(), input.cols());
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[pi].as_mut_slice()[j] += eps;
                let mut minus = inputs.to_vec();
                minus[pi].as_mut_slice()[j] -= eps;
                let eval = |ins: &[Tensor<f64>]| {
                    let mut g = Graph::new();
                    let nodes: Vec<Node> = ins.iter().map(|t| g.constant(t.clone())).collect();
                    let l = build(&mut g, &nodes);
                    g.value(l).scalar()
                };
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.as_slice()[j];
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "param {pi} elem {j}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = SeededRng::new(1);
        let a = Tensor::randn(3, 4, 0.5, &mut rng);
        let b = Tensor::randn(4, 2, 0.5, &mut rng);
        fd_check(
            |g, n| {
                let c = g.matmul(n[0], n[1]);
                let s = g.square_sum(c);
                g.sqrt_scalar(s)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn grad_layer_norm_gelu() {
        let mut rng = SeededRng::new(2);
        let x = Tensor::randn(3, 5, 1.0, &mut rng);
        let gain = Tensor::randn(1, 5, 0.3, &mut rng);
        let bias = Tensor::randn(1, 5, 0.3, &mut rng);
        fd_check(
            |g, n| {
                let ln = g.layer_norm(n[0], n[1], n[2]);
                let act = g.gelu(ln);
                g.square_sum(act)
            },
            &[x, gain, bias],
            1e-5,
        );
    }

    #[test]
    fn grad_causal_attention_with_offset() {
        let mut rng = SeededRng::new(3);
        let t = 3;
        let p = 2;
        let e = 8;
        let q = Tensor::randn(t, e, 0.6, &mut rng);
        let k = Tensor::randn(p + t, e, 0.6, &mut rng);
        let v = Tensor::randn(p + t, e, 0.6, &mut rng);
        fd_check(
            |g, n| {
                let o = g.causal_attention(n[0], n[1], n[2], 2, p);
                g.square_sum(o)
            },
            &[q, k, v],
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_logsumexp_pick() {
        let mut rng = SeededRng::new(4);
        let x = Tensor::randn(1, 5, 1.0, &mut rng);
        fd_check(
            |g, n| {
                let sm = g.softmax_vec(n[0]);
                let ent = g.sum_q_log_q(sm);
                let lse = g.log_sum_exp_vec(n[0]);
                let p = g.pick(sm, 2);
                let lp = g.ln_scalar(p);
                let a = g.add(ent, lse);
                g.add(a, lp)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn grad_mix_hinge_distance() {
        let mut rng = SeededRng::new(5);
        let w_logits = Tensor::randn(1, 3, 1.0, &mut rng);
        let m0 = Tensor::randn(2, 4, 0.8, &mut rng);
        let m1 = Tensor::randn(2, 4, 0.8, &mut rng);
        let m2 = Tensor::randn(2, 4, 0.8, &mut rng);
        let target = Tensor::randn(2, 4, 0.8, &mut rng);
        fd_check(
            |g, n| {
                let w = g.softmax_vec(n[0]);
                let mixed = g.mix(w, vec![n[1], n[2], n[3]]);
                let diff = g.sub(mixed, n[4]);
                let d2 = g.square_sum(diff);
                let d = g.sqrt_scalar(d2);
                g.hinge_sq(d, 2.5)
            },
            &[w_logits, m0, m1, m2, target],
            1e-5,
        );
    }

    #[test]
    fn grad_log_softmax_gather() {
        let mut rng = SeededRng::new(6);
        let x = Tensor::randn(4, 6, 1.0, &mut rng);
        fd_check(
            |g, n| {
                let ls = g.log_softmax_rows(n[0]);
                let picked = g.pick_per_row(ls, vec![1, 0, 5, 2]);
                g.sum_all(picked)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn grad_concat_slice_gather() {
        let mut rng = SeededRng::new(7);
        let a = Tensor::randn(2, 6, 1.0, &mut rng);
        let b = Tensor::randn(3, 6, 1.0, &mut rng);
        fd_check(
            |g, n| {
                let c = g.concat_rows(n[0], n[1]);
                let sl = g.slice_cols(c, 2, 3);
                let gath = g.gather_rows(sl, vec![0, 4, 4, 1]);
                g.square_sum(gath)
            },
            &[a, b],
            1e-5,
        );
    }

    #[test]
    fn frozen_inputs_get_no_grad() {
        let mut rng = SeededRng::new(8);
        let a: Tensor<f64> = Tensor::randn(2, 3, 1.0, &mut rng);
        let b: Tensor<f64> = Tensor::randn(3, 2, 1.0, &mut rng);
        let mut g = Graph::new();
        let pa = g.param(a);
        let cb = g.constant(b);
        let c = g.matmul(pa, cb);
        let loss = g.square_sum(c);
        let grads = g.backward(loss);
        assert!(grads.get(pa).is_some());
        assert!(grads.get(cb).is_none());
    }
}
