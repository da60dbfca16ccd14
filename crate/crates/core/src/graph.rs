//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Values are
//! owned by the graph; callers hold lightweight [`Var`] handles.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Epsilon added to the variance in [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddLast { x: Var, b: Var },
    MulLast { x: Var, s: Var },
    MulScalar { x: Var, s: Var },
    Scale { x: Var, c: f64 },
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MeanRows(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    SwapLast2(Var),
    SwapFirst2(Var),
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    DepthwiseCorr { t: Var, s: Var },
    GatherRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    BceWithLogits { x: Var, target: Vec<f64>, weight: Vec<f64> },
    IouLoss { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Diagnostic faults that deliberately break an operation so that the
/// self-test's negative controls can prove they detect it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Softmax rows are scaled by 1.01 after normalization.
    CorruptSoftmax,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    matmuls: usize,
    fault: Fault,
}

/// `(outer, n, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major `a[n,k] * b[k,m]` accumulated into `out[n,m]`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// Row-major `a[n,k] * b[m,k]^T` accumulated into `out[n,m]`.
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// Row-major `a[k,n]^T * b[k,m]` accumulated into `out[n,m]`.
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * m..(i + 1) * m];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of (batched) matrix products recorded so far.
    pub fn matmul_count(&self) -> usize {
        self.matmuls
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Records a leaf; gradients are accumulated into it when `requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        t.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter, reusing the same leaf on repeated calls.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.leaf(store.tensor(id).clone(), trainable);
        self.params.insert(id, v);
        v
    }

    /// Parameter bindings made on this graph.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.matmuls += 1;
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `a[B,N,K] * b[B,K,M]`, or `a[B,N,K] * b[B,M,K]^T`
    /// when `trans_b`. Counts as a single matrix product.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let inner_b = if trans_b { sb.get(2) } else { sb.get(1) };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || Some(&sa[2]) != inner_b {
            return Err(dim_err(
                "batch_matmul",
                format!("cannot multiply {sa:?} by {sb:?} (trans_b={trans_b})"),
            ));
        }
        let (bs, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; bs * n * m];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for h in 0..bs {
            let ab = &ad[h * n * k..(h + 1) * n * k];
            let bb = &bd[h * k * m..(h + 1) * k * m];
            let ob = &mut out[h * n * m..(h + 1) * n * m];
            if trans_b {
                gemm_nt_acc(ab, bb, ob, n, k, m);
            } else {
                gemm_acc(ab, bb, ob, n, k, m);
            }
        }
        self.matmuls += 1;
        let t = Tensor::new(&[bs, n, m], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let out: Vec<f64> = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        let t = Tensor::new(&[c, r], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    /// `[B, N, M] -> [B, M, N]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err("swap_last2", format!("expected rank 3, got {s:?}")));
        }
        let out = permute3(self.value(x).data(), &s, [0, 2, 1]);
        let t = Tensor::new(&[s[0], s[2], s[1]], out)?;
        Ok(self.push(t, Op::SwapLast2(x), &[x]))
    }

    /// `[A, B, C] -> [B, A, C]`.
    pub fn swap_first2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err("swap_first2", format!("expected rank 3, got {s:?}")));
        }
        let out = permute3(self.value(x).data(), &s, [1, 0, 2]);
        let t = Tensor::new(&[s[1], s[0], s[2]], out)?;
        Ok(self.push(t, Op::SwapFirst2(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data).expect("same shape");
        self.push(t, op, &[a, b])
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&e| f(e)).collect())
            .expect("same shape");
        self.push(t, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn last_dim_vector(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let c = *self.shape(x).last().expect("rank >= 1");
        if self.shape(v) != [c] {
            return Err(dim_err(
                op,
                format!("vector {:?} does not match last dim of {:?}", self.shape(v), self.shape(x)),
            ));
        }
        Ok(c)
    }

    /// `x[..., C] + b[C]`.
    pub fn add_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.last_dim_vector("add_last", x, b)?;
        let bv = self.value(b).data().to_vec();
        let v = self.value(x);
        let data = v.data().iter().enumerate().map(|(i, &e)| e + bv[i % c]).collect();
        let t = Tensor::new(v.shape(), data)?;
        Ok(self.push(t, Op::AddLast { x, b }, &[x, b]))
    }

    /// `x[..., C] * s[C]`, i.e. per-channel scaling broadcast over the rest.
    pub fn mul_last(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.last_dim_vector("mul_last", x, s)?;
        let sv = self.value(s).data().to_vec();
        let v = self.value(x);
        let data = v.data().iter().enumerate().map(|(i, &e)| e * sv[i % c]).collect();
        let t = Tensor::new(v.shape(), data)?;
        Ok(self.push(t, Op::MulLast { x, s }, &[x, s]))
    }

    /// `x * s` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err("mul_scalar", format!("scalar expected, got {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        Ok(self.map(x, Op::MulScalar { x, s }, |e| e * sv))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale { x, c }, |e| e * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |e| if e > 0.0 { e } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", format!("axis {axis} invalid for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..n {
                    out[idx(k)] /= sum;
                }
            }
        }
        if self.fault == Fault::CorruptSoftmax {
            out.iter_mut().for_each(|v| *v *= 1.01);
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization over the last dimension followed by the affine
    /// map `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.last_dim_vector("layer_norm", x, gamma)?;
        self.last_dim_vector("layer_norm", x, beta)?;
        let shape = self.shape(x).to_vec();
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * inv;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| g[i % d] * h + b[i % d])
            .collect();
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    // ---------------------------------------------------------------- reductions & layout

    /// Mean over every dimension except the last: `[..., C] -> [C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("rank >= 1");
        let src = self.value(x).data();
        let rows = src.len() / c;
        let mut out = vec![0.0; c];
        for r in 0..rows {
            out.iter_mut()
                .zip(&src[r * c..(r + 1) * c])
                .for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let t = Tensor::new(&[c], out)?;
        Ok(self.push(t, Op::MeanRows(x), &[x]))
    }

    /// Per-channel spatial mean of an `[H, W, C]` map.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 3 {
            return Err(dim_err(
                "global_avg_pool",
                format!("expected rank-3 [H, W, C], got {:?}", self.shape(x)),
            ));
        }
        self.mean_rows(x)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| dim_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", format!("axis {axis} invalid for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(dim_err(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err(
                "slice",
                format!("[{start}, {}) on axis {axis} out of range for {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }, &[x]))
    }

    /// Selects rows of an `[N, D]` tensor (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(dim_err("gather_rows", format!("rows {rows:?} invalid for {s:?}")));
        }
        let d = self.value(x).data();
        let w = s[1];
        let out: Vec<f64> = rows
            .iter()
            .flat_map(|&r| d[r * w..(r + 1) * w].iter().copied())
            .collect();
        let t = Tensor::new(&[rows.len(), w], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    // ---------------------------------------------------------------- spatial

    /// 2-D convolution of `x[H, W, Cin]` with `k[KH, KW, Cin, Cout]`, zero
    /// padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sx[2] != sk[2] || stride == 0 {
            return Err(dim_err(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sk:?} (stride {stride})"),
            ));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(dim_err(
                "conv2d",
                format!("non-positive output size for input {sx:?}, kernel {sk:?}, pad {pad}"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let (xd, kd) = (self.value(x).data(), self.value(k).data());
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for i in 0..kh {
                    let Some(iy) = (oy * stride + i).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for j in 0..kw {
                        let Some(ix) = (ox * stride + j).checked_sub(pad).filter(|&v| v < w)
                        else {
                            continue;
                        };
                        let xin = &xd[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        let kbase = (i * kw + j) * cin * cout;
                        for (ci, &xv) in xin.iter().enumerate() {
                            let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                            orow.iter_mut().zip(krow).for_each(|(o, &kv)| *o += xv * kv);
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[oh, ow, cout], out)?;
        Ok(self.push(t, Op::Conv2d { x, k, stride, pad }, &[x, k]))
    }

    /// Per-channel valid cross-correlation of `search[Hs, Ws, C]` with the
    /// kernel `template[Ht, Wt, C]`.
    pub fn depthwise_correlate(&mut self, template: Var, search: Var) -> Result<Var> {
        let (st, ss) = (self.shape(template).to_vec(), self.shape(search).to_vec());
        if st.len() != 3 || ss.len() != 3 || st[2] != ss[2] || st[0] > ss[0] || st[1] > ss[1] {
            return Err(dim_err(
                "depthwise_correlate",
                format!("template {st:?} does not fit search {ss:?}"),
            ));
        }
        let (ht, wt, c) = (st[0], st[1], st[2]);
        let ws = ss[1];
        let (oh, ow) = (ss[0] - ht + 1, ss[1] - wt + 1);
        let (td, sd) = (self.value(template).data(), self.value(search).data());
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for x in 0..ow {
                let orow = &mut out[(y * ow + x) * c..(y * ow + x + 1) * c];
                for i in 0..ht {
                    for j in 0..wt {
                        let trow = &td[(i * wt + j) * c..(i * wt + j + 1) * c];
                        let srow = &sd[((y + i) * ws + x + j) * c..((y + i) * ws + x + j + 1) * c];
                        orow.iter_mut()
                            .zip(trow.iter().zip(srow))
                            .for_each(|(o, (a, b))| *o += a * b);
                    }
                }
            }
        }
        let t = Tensor::new(&[oh, ow, c], out)?;
        Ok(self.push(t, Op::DepthwiseCorr { t: template, s: search }, &[template, search]))
    }

    // ---------------------------------------------------------------- losses

    /// `sum_i weight_i * BCE(sigmoid(x_i), target_i)`, computed stably from
    /// logits.
    pub fn bce_with_logits(&mut self, x: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        let n = self.value(x).numel();
        if target.len() != n || weight.len() != n {
            return Err(dim_err(
                "bce_with_logits",
                format!("{n} logits, {} targets, {} weights", target.len(), weight.len()),
            ));
        }
        let loss = self
            .value(x)
            .data()
            .iter()
            .zip(target.iter().zip(weight))
            .map(|(&l, (&z, &w))| w * (l.max(0.0) - l * z + (-l.abs()).exp().ln_1p()))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                x,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean of `1 - IoU` between `(l, t, r, b)` distance rows of `pred[K, 4]`
    /// and `target` (same layout). Target boxes must have positive area.
    pub fn iou_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || s[1] != 4 || target.len() != s[0] * 4 {
            return Err(dim_err(
                "iou_loss",
                format!("pred {s:?} vs {} target values", target.len()),
            ));
        }
        let p = self.value(pred).data();
        let k = s[0];
        let loss = (0..k)
            .map(|r| 1.0 - ltrb_iou(&p[r * 4..r * 4 + 4], &target[r * 4..r * 4 + 4]).iou)
            .sum::<f64>()
            / k as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::IouLoss {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`; gradients accumulate on leaves
    /// that require them (repeated calls add up).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each of its parents.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (n, k, m) = (shp(*a)[0], shp(*a)[1], shp(*b)[1]);
                let mut res = vec![];
                if need(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm_nt_acc(g, val(*b), &mut da, n, m, k);
                    res.push((*a, da));
                }
                if need(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm_tn_acc(val(*a), g, &mut db, k, n, m);
                    res.push((*b, db));
                }
                res
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (bs, n, k) = (shp(*a)[0], shp(*a)[1], shp(*a)[2]);
                let m = out.shape()[2];
                let (ad, bd) = (val(*a), val(*b));
                let mut da = vec![0.0; bs * n * k];
                let mut db = vec![0.0; bs * k * m];
                for h in 0..bs {
                    let gb = &g[h * n * m..(h + 1) * n * m];
                    let ab = &ad[h * n * k..(h + 1) * n * k];
                    let bb = &bd[h * k * m..(h + 1) * k * m];
                    let dab = &mut da[h * n * k..(h + 1) * n * k];
                    let dbb = &mut db[h * k * m..(h + 1) * k * m];
                    if *trans_b {
                        // C = A B^T: dA = G B, dB = G^T A
                        gemm_acc(gb, bb, dab, n, m, k);
                        gemm_tn_acc(gb, ab, dbb, m, n, k);
                    } else {
                        gemm_nt_acc(gb, bb, dab, n, m, k);
                        gemm_tn_acc(ab, gb, dbb, k, n, m);
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(av).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::AddLast { x, b } => {
                let c = shp(*b)[0];
                let mut db = vec![0.0; c];
                g.iter().enumerate().for_each(|(i, v)| db[i % c] += v);
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::MulLast { x, s } => {
                let c = shp(*s)[0];
                let (xv, sv) = (val(*x), val(*s));
                let mut ds = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (i, gv) in g.iter().enumerate() {
                    ds[i % c] += gv * xv[i];
                    dx[i] = gv * sv[i % c];
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::MulScalar { x, s } => {
                let sv = val(*s)[0];
                let ds: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                vec![(*x, g.iter().map(|v| v * sv).collect()), (*s, vec![ds])]
            }
            Op::Scale { x, c } => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::Relu(x) => vec![(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )],
            Op::Sigmoid(x) => vec![(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect(),
            )],
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = shp(*gamma)[0];
                let gm = val(*gamma);
                let rows = g.len() / d;
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gm[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        dx[r * d + j] = scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::MeanRows(x) => {
                let c = g.len();
                let n = val(*x).len();
                let rows = (n / c) as f64;
                vec![(*x, (0..n).map(|i| g[i % c] / rows).collect())]
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut res: Vec<(Var, Vec<f64>)> = xs
                    .iter()
                    .map(|&x| (x, Vec::with_capacity(val(x).len())))
                    .collect();
                for o in 0..outer {
                    let mut off = 0;
                    for (x, buf) in res.iter_mut() {
                        let n = shp(*x)[*axis];
                        let base = (o * total + off) * inner;
                        buf.extend_from_slice(&g[base..base + n * inner]);
                        off += n;
                    }
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(shp(*x), *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Transpose(x) => {
                let (r, c) = (shp(*x)[0], shp(*x)[1]);
                // out is [c, r]; dx[i][j] = g[j][i]
                vec![(*x, (0..r * c).map(|idx| g[(idx % c) * r + idx / c]).collect())]
            }
            Op::SwapLast2(x) => vec![(*x, permute3(g, out.shape(), [0, 2, 1]))],
            Op::SwapFirst2(x) => vec![(*x, permute3(g, out.shape(), [1, 0, 2]))],
            Op::Conv2d { x, k, stride, pad } => {
                let (sx, sk) = (shp(*x), shp(*k));
                let (h, w, cin) = (sx[0], sx[1], sx[2]);
                let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
                let (oh, ow) = (out.shape()[0], out.shape()[1]);
                let (xd, kd) = (val(*x), val(*k));
                let mut dx = vec![0.0; xd.len()];
                let mut dk = vec![0.0; kd.len()];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                        for i in 0..kh {
                            let Some(iy) = (oy * stride + i).checked_sub(*pad).filter(|&v| v < h)
                            else {
                                continue;
                            };
                            for j in 0..kw {
                                let Some(ix) =
                                    (ox * stride + j).checked_sub(*pad).filter(|&v| v < w)
                                else {
                                    continue;
                                };
                                let xoff = (iy * w + ix) * cin;
                                let kbase = (i * kw + j) * cin * cout;
                                for ci in 0..cin {
                                    let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    let xv = xd[xoff + ci];
                                    let dkrow = &mut dk[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        acc += grow[co] * krow[co];
                                        dkrow[co] += grow[co] * xv;
                                    }
                                    dx[xoff + ci] += acc;
                                }
                            }
                        }
                    }
                }
                vec![(*x, dx), (*k, dk)]
            }
            Op::DepthwiseCorr { t, s } => {
                let (st, ss) = (shp(*t), shp(*s));
                let (ht, wt, c) = (st[0], st[1], st[2]);
                let ws = ss[1];
                let (oh, ow) = (out.shape()[0], out.shape()[1]);
                let (td, sd) = (val(*t), val(*s));
                let mut dt = vec![0.0; td.len()];
                let mut ds = vec![0.0; sd.len()];
                for y in 0..oh {
                    for x in 0..ow {
                        let grow = &g[(y * ow + x) * c..(y * ow + x + 1) * c];
                        for i in 0..ht {
                            for j in 0..wt {
                                let toff = (i * wt + j) * c;
                                let soff = ((y + i) * ws + x + j) * c;
                                for ch in 0..c {
                                    dt[toff + ch] += grow[ch] * sd[soff + ch];
                                    ds[soff + ch] += grow[ch] * td[toff + ch];
                                }
                            }
                        }
                    }
                }
                vec![(*t, dt), (*s, ds)]
            }
            Op::GatherRows { x, rows } => {
                let w = shp(*x)[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..w {
                        dx[r * w + j] += g[k * w + j];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::BceWithLogits { x, target, weight } => vec![(
                *x,
                val(*x)
                    .iter()
                    .zip(target.iter().zip(weight))
                    .map(|(&l, (&z, &w))| g[0] * w * (sigmoid(l) - z))
                    .collect(),
            )],
            Op::IouLoss { pred, target } => {
                let p = val(*pred);
                let k = shp(*pred)[0];
                let mut dp = vec![0.0; p.len()];
                for r in 0..k {
                    let parts = ltrb_iou(&p[r * 4..r * 4 + 4], &target[r * 4..r * 4 + 4]);
                    let scale = -g[0] / k as f64;
                    for (j, d) in parts.d_iou.iter().enumerate() {
                        dp[r * 4 + j] = scale * d;
                    }
                }
                vec![(*pred, dp)]
            }
        }
    }
}

/// Permutes a rank-3 buffer of shape `shape`; output axis `i` is input axis
/// `perm[i]`.
fn permute3(src: &[f64], shape: &[usize], perm: [usize; 3]) -> Vec<f64> {
    let (d0, d1, d2) = (shape[0], shape[1], shape[2]);
    let dims = [d0, d1, d2];
    let od = [dims[perm[0]], dims[perm[1]], dims[perm[2]]];
    let mut out = vec![0.0; src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let idx = [a, b, c];
                let o = (idx[perm[0]] * od[1] + idx[perm[1]]) * od[2] + idx[perm[2]];
                out[o] = src[(a * d1 + b) * d2 + c];
            }
        }
    }
    out
}

struct IouParts {
    iou: f64,
    d_iou: [f64; 4],
}

fn ltrb_iou(p: &[f64], t: &[f64]) -> IouParts {
    let (l, tp, r, b) = (p[0], p[1], p[2], p[3]);
    let (gl, gt, gr, gb) = (t[0], t[1], t[2], t[3]);
    let area_p = (l + r) * (tp + b);
    let area_t = (gl + gr) * (gt + gb);
    let wi = l.min(gl) + r.min(gr);
    let hi = tp.min(gt) + b.min(gb);
    let inter = wi * hi;
    let union = area_p + area_t - inter;
    let iou = inter / union;
    // d(inter)/d(pred) and d(union)/d(pred)
    let ind = |a: f64, b: f64| if a < b { 1.0 } else { 0.0 };
    let di = [ind(l, gl) * hi, ind(tp, gt) * wi, ind(r, gr) * hi, ind(b, gb) * wi];
    let da = [tp + b, l + r, tp + b, l + r];
    let mut d_iou = [0.0; 4];
    for j in 0..4 {
        let du = da[j] - di[j];
        d_iou[j] = (di[j] * union - inter * du) / (union * union);
    }
    IouParts { iou, d_iou }
}
