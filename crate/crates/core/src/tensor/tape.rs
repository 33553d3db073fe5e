//! Wengert tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in reverse creation order, which is a valid topological order since
//! inputs always precede outputs.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const SOFTPLUS_LINEAR_ABOVE: f64 = 30.0;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { x: Var, row: Var },
    ScaleRows { x: Var, s: Var },
    Scale(Var, T),
    AddConst(Var),
    MatMul { x: Var, w: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softplus(Var),
    Gelu(Var),
    Sigmoid(Var),
    NormalCdf(Var),
    SumAll(Var),
    SumRows(Var),
    SumLast(Var),
    Broadcast(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, outer: usize, inner: usize, sizes: Vec<usize> },
    Slice { x: Var, outer: usize, inner: usize, axis_len: usize, start: usize, len: usize },
    Permute0213 { x: Var, dims: [usize; 4] },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { src: Var, idx: Vec<usize> },
    GatherCols { x: Var, idx: Vec<usize>, width: usize, k: usize },
    ScatterCols { src: Var, idx: Vec<usize>, width: usize, k: usize },
    Upsample { x: Var, plan: Box<BilinearPlan<T>> },
}

#[derive(Debug)]
struct BilinearPlan<T> {
    batch: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    ys: Vec<(usize, usize, T)>,
    xs: Vec<(usize, usize, T)>,
}

/// Interpolation taps for half-pixel-centred bilinear resampling.
fn bilinear_taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            (i0, i1, T::of(frac))
        })
        .collect()
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner recording of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = &self.nodes[x.0].value;
        let out = Tensor { shape: v.shape().to_vec(), data: v.data().iter().map(|&e| f(e)).collect() };
        self.push(out, op, &[x])
    }

    fn zip(&mut self, op_name: &str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `x[.., n] + row[n]`, broadcasting the row over every leading index.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(row).numel() != n {
            return Err(shape_err("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(row))));
        }
        let r = self.data(row).to_vec();
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let out = Tensor { shape: self.shape(x).to_vec(), data };
        Ok(self.push(out, Op::AddRow { x, row }, &[x, row]))
    }

    /// Multiplies row `r` of `x` (viewed `[rows, last]`) by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.last_dim());
        if self.value(s).numel() != rows {
            return Err(shape_err("scale_rows", format!("{:?} by {:?}", self.shape(x), self.shape(s))));
        }
        let sv = self.data(s);
        let data = xv.data().chunks(n).zip(sv).flat_map(|(row, &c)| row.iter().map(move |&e| e * c)).collect();
        let out = Tensor { shape: xv.shape().to_vec(), data };
        Ok(self.push(out, Op::ScaleRows { x, s }, &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(x, Op::Scale(x, c), |e| e * c)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(x, Op::AddConst(x), |e| e + c)
    }

    /// `x[.., k] · w[k, n]` with every leading axis folded into rows.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(shape_err("matmul", format!("{xs:?} · {ws:?}")));
        }
        let k = ws[0];
        let n = ws[1];
        let m = self.value(x).rows();
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut data = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(x), k, 1, self.data(w), n, 1, &mut data, false);
        Ok(self.push(Tensor { shape, data }, Op::MatMul { x, w, m, k, n }, &[x, w]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", format!("{sa:?} · {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("bmm", format!("{sa:?} · {sb:?} (trans_b={trans_b})")));
        }
        let mut data = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                k,
                1,
                &bd[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor { shape: vec![batch, m, n], data };
        Ok(self.push(out, Op::Bmm { a, b, batch, m, k, n, trans_b }, &[a, b]))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor { shape: xv.shape().to_vec(), data };
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Layer normalisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(shape_err("layer_norm", format!("affine params must have {n} entries")));
        }
        let rows = xv.rows();
        let eps = T::of(LAYER_NORM_EPS);
        let nt = T::of(n as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / nt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&e| (e - mean) * r));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let data = xhat.chunks(n).flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b)).collect();
        let out = Tensor { shape: xv.shape().to_vec(), data };
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |e| {
            let u = T::of(GELU_C) * (e + T::of(GELU_A) * e * e * e);
            T::of(0.5) * e * (T::one() + u.tanh())
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// Standard normal CDF.
    pub fn normal_cdf(&mut self, x: Var) -> Var {
        self.map(x, Op::NormalCdf(x), |e| T::of(0.5 * libm::erfc(-e.f64() / std::f64::consts::SQRT_2)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums `[rows, n]` over rows, giving `[n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = vec![T::zero(); n];
        for row in xv.data().chunks(n) {
            for (o, &e) in data.iter_mut().zip(row) {
                *o += e;
            }
        }
        self.push(Tensor { shape: vec![n], data }, Op::SumRows(x), &[x])
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let data: Vec<T> = xv.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        let mut shape = xv.shape()[..xv.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor { shape, data }, Op::SumLast(x), &[x])
    }

    /// Repeats a single-element tensor into `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.value(x).numel() != 1 {
            return Err(shape_err("broadcast", format!("source {:?} is not a scalar", self.shape(x))));
        }
        let out = Tensor::full(shape.to_vec(), self.data(x)[0]);
        Ok(self.push(out, Op::Broadcast(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Concatenates `[outer, s_i, inner]`-shaped parts along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 3 {
            return Err(shape_err("concat", format!("expected rank-3 parts, got {first:?}")));
        }
        let (outer, inner) = (first[0], first[2]);
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != outer || s[2] != inner {
                return Err(shape_err("concat", format!("{s:?} incompatible with {first:?}")));
            }
            sizes.push(s[1]);
        }
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &s) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&self.data(p)[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let out = Tensor { shape: vec![outer, total, inner], data };
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), outer, inner, sizes }, parts))
    }

    /// Takes `len` entries starting at `start` along axis 1 of a rank-3 tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || len == 0 || start + len > s[1] {
            return Err(shape_err("slice", format!("[{start}, {start}+{len}) of {s:?}")));
        }
        let (outer, axis_len, inner) = (s[0], s[1], s[2]);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let out = Tensor { shape: vec![outer, len, inner], data };
        Ok(self.push(out, Op::Slice { x, outer, inner, axis_len, start, len }, &[x]))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(shape_err("permute_0213", format!("rank-4 input required, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let data = permute_0213_data(self.data(x), dims);
        let out = Tensor { shape: vec![dims[0], dims[2], dims[1], dims[3]], data };
        Ok(self.push(out, Op::Permute0213 { x, dims }, &[x]))
    }

    /// Selects rows of `x` viewed as `[rows, last]`; output `[idx.len(), last]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.last_dim());
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("indices out of range for {rows} rows")));
        }
        let data = idx.iter().flat_map(|&i| xv.data()[i * n..(i + 1) * n].iter().copied()).collect();
        let out = Tensor { shape: vec![idx.len(), n], data };
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Places row `i` of `src` at row `idx[i]` of a zero `[rows, last]` output,
    /// adding where indices repeat.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let sv = self.value(src);
        let n = sv.last_dim();
        if sv.rows() != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err("scatter_rows", format!("{} rows into {rows}", sv.rows())));
        }
        let mut data = vec![T::zero(); rows * n];
        for (r, &i) in idx.iter().enumerate() {
            for (o, &e) in data[i * n..(i + 1) * n].iter_mut().zip(&sv.data()[r * n..(r + 1) * n]) {
                *o += e;
            }
        }
        let out = Tensor { shape: vec![rows, n], data };
        Ok(self.push(out, Op::ScatterRows { src, idx: idx.to_vec() }, &[src]))
    }

    /// Per-row column gather: `x[rows, width]`, `idx[rows * k]` -> `[rows, k]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, width) = (xv.rows(), xv.last_dim());
        if k == 0 || idx.len() != rows * k || idx.iter().any(|&i| i >= width) {
            return Err(shape_err("gather_cols", format!("bad index set for {:?}", xv.shape())));
        }
        let data = idx.iter().enumerate().map(|(j, &c)| xv.data()[(j / k) * width + c]).collect();
        let out = Tensor { shape: vec![rows, k], data };
        Ok(self.push(out, Op::GatherCols { x, idx: idx.to_vec(), width, k }, &[x]))
    }

    /// Inverse of [`gather_cols`](Self::gather_cols): scatters `[rows, k]` into zeros `[rows, width]`.
    pub fn scatter_cols(&mut self, src: Var, idx: &[usize], width: usize) -> Result<Var> {
        let sv = self.value(src);
        let (rows, k) = (sv.rows(), sv.last_dim());
        if idx.len() != rows * k || idx.iter().any(|&i| i >= width) {
            return Err(shape_err("scatter_cols", format!("bad index set for {:?}", sv.shape())));
        }
        let mut data = vec![T::zero(); rows * width];
        for (j, &c) in idx.iter().enumerate() {
            data[(j / k) * width + c] += sv.data()[j];
        }
        let out = Tensor { shape: vec![rows, width], data };
        Ok(self.push(out, Op::ScatterCols { src, idx: idx.to_vec(), width, k }, &[src]))
    }

    /// Bilinear resampling of `[B, h, w]` maps to `[B, out_h, out_w]`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(shape_err("upsample_bilinear", format!("input {s:?}")));
        }
        let plan = BilinearPlan {
            batch: s[0],
            in_hw: (s[1], s[2]),
            out_hw: (out_h, out_w),
            ys: bilinear_taps(s[1], out_h),
            xs: bilinear_taps(s[2], out_w),
        };
        let xd = self.data(x);
        let (ih, iw) = plan.in_hw;
        let mut data = Vec::with_capacity(plan.batch * out_h * out_w);
        for b in 0..plan.batch {
            let img = &xd[b * ih * iw..(b + 1) * ih * iw];
            for &(y0, y1, fy) in &plan.ys {
                for &(x0, x1, fx) in &plan.xs {
                    let top = img[y0 * iw + x0] * (T::one() - fx) + img[y0 * iw + x1] * fx;
                    let bot = img[y1 * iw + x0] * (T::one() - fx) + img[y1 * iw + x1] * fx;
                    data.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let out = Tensor { shape: vec![plan.batch, out_h, out_w], data };
        Ok(self.push(out, Op::Upsample { x, plan: Box::new(plan) }, &[x]))
    }

    /// Populates gradients of every grad-requiring node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot, &self.nodes);
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Ops hold only Copy handles or owned buffers; borrow the op by
        // temporarily swapping it out so `acc` can mutate `grads`.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*b, |gb, _| gb.iter_mut().zip(g).for_each(|(o, &e)| *o -= e));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga, n| {
                    for ((o, &e), &bv) in ga.iter_mut().zip(g).zip(n[b.0].value.data()) {
                        *o += e * bv;
                    }
                });
                self.acc(b, |gb, n| {
                    for ((o, &e), &av) in gb.iter_mut().zip(g).zip(n[a.0].value.data()) {
                        *o += e * av;
                    }
                });
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga, n| {
                    for ((o, &e), &bv) in ga.iter_mut().zip(g).zip(n[b.0].value.data()) {
                        *o += e / bv;
                    }
                });
                self.acc(b, |gb, n| {
                    let (av, bv) = (n[a.0].value.data(), n[b.0].value.data());
                    for (j, o) in gb.iter_mut().enumerate() {
                        *o -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::AddRow { x, row } => {
                self.acc(*x, |gx, _| add_into(gx, g));
                self.acc(*row, |gr, _| {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let (x, s) = (*x, *s);
                self.acc(x, |gx, nodes| {
                    let sv = nodes[s.0].value.data();
                    let n = gx.len() / sv.len();
                    for (r, (gr, grow)) in gx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        for (o, &e) in gr.iter_mut().zip(grow) {
                            *o += e * sv[r];
                        }
                    }
                });
                self.acc(s, |gs, nodes| {
                    let xv = nodes[x.0].value.data();
                    let n = xv.len() / gs.len();
                    for (r, o) in gs.iter_mut().enumerate() {
                        *o += g[r * n..(r + 1) * n].iter().zip(&xv[r * n..(r + 1) * n]).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(*x, |gx, _| gx.iter_mut().zip(g).for_each(|(o, &e)| *o += e * c));
            }
            Op::AddConst(x) => self.acc(*x, |gx, _| add_into(gx, g)),
            Op::MatMul { x, w, m, k, n } => {
                let (x, w, m, k, n) = (*x, *w, *m, *k, *n);
                // dX = dC · Wᵀ
                self.acc(x, |gx, nodes| {
                    T::gemm(m, n, k, g, n, 1, nodes[w.0].value.data(), 1, n, gx, true);
                });
                // dW = Xᵀ · dC
                self.acc(w, |gw, nodes| {
                    T::gemm(k, m, n, nodes[x.0].value.data(), 1, k, g, n, 1, gw, true);
                });
            }
            Op::Bmm { a, b, batch, m, k, n, trans_b } => {
                let (a, b, batch, m, k, n, tb) = (*a, *b, *batch, *m, *k, *n, *trans_b);
                self.acc(a, |ga, nodes| {
                    let bd = nodes[b.0].value.data();
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        // dA = dC · Bᵀ where B is [k, n] (or stored [n, k] when transposed)
                        let (rs, cs) = if tb { (k, 1) } else { (1, n) };
                        T::gemm(m, n, k, gi, n, 1, bi, rs, cs, &mut ga[i * m * k..(i + 1) * m * k], true);
                    }
                });
                self.acc(b, |gb, nodes| {
                    let ad = nodes[a.0].value.data();
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            // stored [n, k]: dB = dCᵀ · A
                            T::gemm(n, m, k, gi, 1, n, ai, k, 1, out, true);
                        } else {
                            T::gemm(k, m, n, ai, 1, k, gi, n, 1, out, true);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = self.nodes[i].value.last_dim();
                let y = self.nodes[i].value.data().to_vec();
                self.acc(*x, |gx, _| {
                    for ((o, yr), gr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = xhat.len() / rstd.len();
                self.acc(*bias, |gb, _| {
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                });
                self.acc(*gain, |gg, _| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &a), &b) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += a * b;
                        }
                    }
                });
                let gain = *gain;
                self.acc(*x, |gx, nodes| {
                    let gv = nodes[gain.0].value.data();
                    let nt = T::of(n as f64);
                    for (r, ((o, gr), hr)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let scale = rstd[r] / nt;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            o[j] += scale * (nt * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let x = *x;
                self.acc(x, |gx, nodes| {
                    for ((o, &e), &xv) in gx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        let d = if xv.f64() > SOFTPLUS_LINEAR_ABOVE { T::one() } else { sigmoid(xv) };
                        *o += e * d;
                    }
                });
            }
            Op::Gelu(x) => {
                let x = *x;
                self.acc(x, |gx, nodes| {
                    let (c, a) = (T::of(GELU_C), T::of(GELU_A));
                    let half = T::of(0.5);
                    for ((o, &e), &xv) in gx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        let t = (c * (xv + a * xv * xv * xv)).tanh();
                        let du = c * (T::one() + T::of(3.0) * a * xv * xv);
                        let d = half * (T::one() + t) + half * xv * (T::one() - t * t) * du;
                        *o += e * d;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let x = *x;
                self.acc(x, |gx, nodes| {
                    // σ(x)·σ(−x): 1 − σ(x) rounds to 0 for large x in f32
                    for ((o, &e), &xv) in gx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        *o += e * sigmoid(xv) * sigmoid(-xv);
                    }
                });
            }
            Op::NormalCdf(x) => {
                let x = *x;
                self.acc(x, |gx, nodes| {
                    let inv = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                    for ((o, &e), &xv) in gx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        let z = xv.f64();
                        *o += e * T::of(inv * (-0.5 * z * z).exp());
                    }
                });
            }
            Op::SumAll(x) => {
                let s = g[0];
                self.acc(*x, |gx, _| gx.iter_mut().for_each(|o| *o += s));
            }
            Op::SumRows(x) => {
                self.acc(*x, |gx, _| {
                    for chunk in gx.chunks_mut(g.len()) {
                        add_into(chunk, g);
                    }
                });
            }
            Op::SumLast(x) => {
                self.acc(*x, |gx, _| {
                    let n = gx.len() / g.len();
                    for (chunk, &e) in gx.chunks_mut(n).zip(g) {
                        chunk.iter_mut().for_each(|o| *o += e);
                    }
                });
            }
            Op::Broadcast(x) => {
                let s: T = g.iter().copied().sum();
                self.acc(*x, |gx, _| gx[0] += s);
            }
            Op::Reshape(x) => self.acc(*x, |gx, _| add_into(gx, g)),
            Op::Concat { parts, outer, inner, sizes } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&p, &s) in parts.iter().zip(sizes) {
                    self.acc(p, |gp, _| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + s) * inner];
                            add_into(&mut gp[o * s * inner..(o + 1) * s * inner], src);
                        }
                    });
                    offset += s;
                }
            }
            Op::Slice { x, outer, inner, axis_len, start, len } => {
                self.acc(*x, |gx, _| {
                    for o in 0..*outer {
                        let base = (o * axis_len + start) * inner;
                        add_into(&mut gx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Permute0213 { x, dims } => {
                let back = permute_0213_data(g, [dims[0], dims[2], dims[1], dims[3]]);
                self.acc(*x, |gx, _| add_into(gx, &back));
            }
            Op::GatherRows { x, idx } => {
                self.acc(*x, |gx, _| {
                    let n = g.len() / idx.len();
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ScatterRows { src, idx } => {
                self.acc(*src, |gs, _| {
                    let n = gs.len() / idx.len();
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::GatherCols { x, idx, width, k } => {
                self.acc(*x, |gx, _| {
                    for (j, &c) in idx.iter().enumerate() {
                        gx[(j / k) * width + c] += g[j];
                    }
                });
            }
            Op::ScatterCols { src, idx, width, k } => {
                self.acc(*src, |gs, _| {
                    for (j, &c) in idx.iter().enumerate() {
                        gs[j] += g[(j / k) * width + c];
                    }
                });
            }
            Op::Upsample { x, plan } => {
                self.acc(*x, |gx, _| {
                    let (ih, iw) = plan.in_hw;
                    let (oh, ow) = plan.out_hw;
                    for b in 0..plan.batch {
                        let img = &mut gx[b * ih * iw..(b + 1) * ih * iw];
                        let gb = &g[b * oh * ow..(b + 1) * oh * ow];
                        let mut p = 0;
                        for &(y0, y1, fy) in &plan.ys {
                            for &(x0, x1, fx) in &plan.xs {
                                let e = gb[p];
                                p += 1;
                                let (top, bot) = (e * (T::one() - fy), e * fy);
                                img[y0 * iw + x0] += top * (T::one() - fx);
                                img[y0 * iw + x1] += top * fx;
                                img[y1 * iw + x0] += bot * (T::one() - fx);
                                img[y1 * iw + x1] += bot * fx;
                            }
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &e) in dst.iter_mut().zip(src) {
        *o += e;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        sum += *e;
    }
    for e in row.iter_mut() {
        *e /= sum;
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x.f64() > SOFTPLUS_LINEAR_ABOVE {
        x
    } else {
        // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
        x.max(T::zero()) + (-x.abs()).exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn permute_0213_data<T: Scalar>(src: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let o = ((i * c + k) * b + j) * d;
                out[o..o + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}
