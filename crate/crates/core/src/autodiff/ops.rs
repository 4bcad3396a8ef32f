use super::array::{broadcast_offsets, broadcast_shape, Array};
use super::gemm::gemm;
use super::graph::{Graph, Op, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

/// Output extent of a convolution along one axis.
pub(crate) fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be positive".into()));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} does not fit padded input {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "non-integer output extent: ({input} + 2*{pad} - {kernel}) / {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let mut cols = vec![0.0; self.cin * self.kh * self.kw * n];
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * n;
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src = (c * self.h + ii as usize) * self.w;
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                cols[row + oi * self.wo + oj] = x[src + jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let n = self.ho * self.wo;
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * n;
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = (c * self.h + ii as usize) * self.w;
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dx[dst + jj as usize] += cols[row + oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 3 || w.len() != 4 {
        return Err(shape_err!(
            "conv2d expects input [C,H,W] and kernel [Co,Ci,kh,kw], got {x:?} and {w:?}"
        ));
    }
    if x[0] != w[1] {
        return Err(shape_err!(
            "conv2d input has {} channels but kernel expects {}",
            x[0],
            w[1]
        ));
    }
    Ok(ConvGeom {
        cin: x[0],
        h: x[1],
        w: x[2],
        kh: w[2],
        kw: w[3],
        ho: conv_extent(x[1], w[2], stride, pad)?,
        wo: conv_extent(x[2], w[3], stride, pad)?,
        stride,
        pad,
    })
}

impl Graph {
    fn binary(&mut self, a: Var, b: Var, kind: Bin) -> Result<Var> {
        let f: fn(f64, f64) -> f64 = match kind {
            Bin::Add => |x: f64, y: f64| x + y,
            Bin::Sub => |x: f64, y: f64| x - y,
            Bin::Mul => |x: f64, y: f64| x * y,
            Bin::Div => |x: f64, y: f64| x / y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Array::new(va.shape(), data)?
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape())?;
            let oa = broadcast_offsets(va.shape(), &shape);
            let ob = broadcast_offsets(vb.shape(), &shape);
            let (da, db) = (va.data(), vb.data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            Array::new(&shape, data)?
        };
        let op = match kind {
            Bin::Add => Op::Add(a, b),
            Bin::Sub => Op::Sub(a, b),
            Bin::Mul => Op::Mul(a, b),
            Bin::Div => Op::Div(a, b),
        };
        self.push(value, op)
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x))
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` may be rank 2 (shared across the leading axes of `a`) or have the same
    /// leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!("matmul needs rank >= 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; out_shape.iter().product()];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if sb.len() == 2 {
            let rows = da.len() / k;
            gemm(rows, k, n, da, false, db, false, 0.0, &mut out);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(shape_err!("matmul batch axes differ: {sa:?} x {sb:?}"));
            }
            let batches = da.len() / (m * k);
            for bi in 0..batches {
                gemm(
                    m,
                    k,
                    n,
                    &da[bi * m * k..],
                    false,
                    &db[bi * k * n..],
                    false,
                    0.0,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let value = Array::new(&out_shape, out)?;
        self.push(value, Op::MatMul(a, b))
    }

    /// Transpose of a rank-2 array.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(shape_err!("transpose expects rank 2, got {:?}", v.shape()));
        }
        let value = transpose2(v);
        self.push(value, Op::Transpose(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.powf(p));
        self.push(value, Op::Powf(x, p))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Array::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let value = Array::scalar(v.sum() / v.len() as f64);
        self.push(value, Op::Mean(x))
    }

    /// Sum along `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let (outer, d, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let data = v.data();
        for o in 0..outer {
            for a in 0..d {
                let src = &data[(o * d + a) * inner..(o * d + a + 1) * inner];
                for (acc, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let value = Array::new(&shape, out)?;
        self.push(value, Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        let d = self.shape(x)[axis];
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / d as f64)
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let (outer, d, inner) = split_axis(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * d + a) * inner + i;
                let max = (0..d).map(|a| out[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..d {
                    let e = (out[at(a)] - max).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..d {
                    out[at(a)] /= z;
                }
            }
        }
        let value = Array::new(v.shape(), out)?;
        self.push(value, Op::Softmax { x, axis })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let d = *v.shape().last().ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!(
                "layer_norm affine params must have shape [{d}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let rows = v.len() / d;
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (o, x) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (x - mean) * s;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| xh * g[i % d] + b[i % d])
            .collect();
        let value = Array::new(v.shape(), out)?;
        let xhat = Array::new(v.shape(), xhat)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| shape_err!("concat of nothing"))?)
            .shape()
            .to_vec();
        check_axis(&first, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat shapes disagree: {first:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Array::new(&shape, out)?;
        self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        if len == 0 || start + len > v.shape()[axis] {
            return Err(shape_err!(
                "narrow [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                v.shape()
            ));
        }
        let (outer, d, inner) = split_axis(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let value = Array::new(&shape, out)?;
        self.push(value, Op::Narrow { x, axis, start })
    }

    /// Rows of `x` (along axis 0) at `idx`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().first().ok_or_else(|| shape_err!("gather on a scalar"))?;
        if idx.is_empty() {
            return Err(shape_err!("gather with no indices"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err!("gather index {bad} out of range for {n} rows"));
        }
        let row = v.len() / n;
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let value = Array::new(&shape, out)?;
        self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x))
    }

    /// Cross-correlation of `x: [Ci,H,W]` with `w: [Co,Ci,kh,kw]`, optional bias `[Co]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = conv_geom(self.shape(x), self.shape(w), stride, pad)?;
        let cout = self.shape(w)[0];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv2d bias must be [{cout}], got {:?}", self.shape(b)));
            }
        }
        let n = geom.ho * geom.wo;
        let ckk = geom.cin * geom.kh * geom.kw;
        let mut out = vec![0.0; cout * n];
        if let Some(b) = bias {
            for (c, &bv) in self.value(b).data().iter().enumerate() {
                out[c * n..(c + 1) * n].fill(bv);
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if geom.is_pointwise() {
            gemm(cout, ckk, n, wd, false, xd, false, beta, &mut out);
        } else {
            let cols = geom.im2col(xd);
            gemm(cout, ckk, n, wd, false, &cols, false, beta, &mut out);
        }
        let value = Array::new(&[cout, geom.ho, geom.wo], out)?;
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b: bias,
                stride,
                pad,
            },
        )
    }

    /// Clamp each element into `[lo[k], hi[k]]`, where `k` is its index along the last axis.
    pub fn clamp_last(&mut self, x: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let v = self.value(x);
        let d = *v.shape().last().ok_or_else(|| shape_err!("clamp on a scalar"))?;
        if lo.len() != d || hi.len() != d {
            return Err(shape_err!("clamp bounds must have length {d}"));
        }
        let out = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x.clamp(lo[i % d], hi[i % d]))
            .collect();
        let value = Array::new(v.shape(), out)?;
        self.push(
            value,
            Op::Clamp {
                x,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
        )
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn transpose2(v: &Array) -> Array {
    let (r, c) = (v.shape()[0], v.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = v.data()[i * c + j];
        }
    }
    Array::new(&[c, r], out).expect("transpose preserves element count")
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape(), data).expect("operands share a shape")
}

/// Reduce a full-size gradient back to the (possibly broadcast) operand shape.
fn unbroadcast(full: Vec<f64>, out_shape: &[usize], src: &[usize]) -> Array {
    if out_shape == src {
        return Array::new(src, full).expect("same shape");
    }
    let offsets = broadcast_offsets(src, out_shape);
    let mut acc = Array::zeros(src);
    let d = acc.data_mut();
    for (o, v) in offsets.iter().zip(full) {
        d[*o] += v;
    }
    acc
}

/// Operand values as they were broadcast to the output shape.
fn expanded(v: &Array, out_shape: &[usize]) -> Vec<f64> {
    if v.shape() == out_shape {
        v.data().to_vec()
    } else {
        broadcast_offsets(v.shape(), out_shape)
            .into_iter()
            .map(|o| v.data()[o])
            .collect()
    }
}

/// Gradient contributions of node `i` to its parents given its output gradient `g`.
pub(crate) fn backward_rule(graph: &Graph, i: usize, g: &Array) -> Result<Vec<(Var, Array)>> {
    let node = &graph.nodes[i];
    let val = |v: Var| &graph.nodes[v.0].value;
    let needs = |v: Var| graph.nodes[v.0].requires_grad;
    let out = &node.value;
    let mut res = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(*a) {
                res.push((*a, unbroadcast(g.data().to_vec(), out.shape(), val(*a).shape())));
            }
            if needs(*b) {
                let full = g.data().iter().map(|v| sign * v).collect();
                res.push((*b, unbroadcast(full, out.shape(), val(*b).shape())));
            }
        }
        Op::Mul(a, b) => {
            let (ea, eb) = (expanded(val(*a), out.shape()), expanded(val(*b), out.shape()));
            if needs(*a) {
                let full = g.data().iter().zip(&eb).map(|(g, y)| g * y).collect();
                res.push((*a, unbroadcast(full, out.shape(), val(*a).shape())));
            }
            if needs(*b) {
                let full = g.data().iter().zip(&ea).map(|(g, x)| g * x).collect();
                res.push((*b, unbroadcast(full, out.shape(), val(*b).shape())));
            }
        }
        Op::Div(a, b) => {
            let (ea, eb) = (expanded(val(*a), out.shape()), expanded(val(*b), out.shape()));
            if needs(*a) {
                let full = g.data().iter().zip(&eb).map(|(g, y)| g / y).collect();
                res.push((*a, unbroadcast(full, out.shape(), val(*a).shape())));
            }
            if needs(*b) {
                let full = g
                    .data()
                    .iter()
                    .zip(ea.iter().zip(&eb))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                res.push((*b, unbroadcast(full, out.shape(), val(*b).shape())));
            }
        }
        Op::Scale(x, c) => res.push((*x, g.map(|v| v * c))),
        Op::AddScalar(x) | Op::Reshape(x) => {
            res.push((*x, g.clone().reshape(val(*x).shape())?));
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (sa, sb) = (va.shape(), vb.shape());
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = sb[sb.len() - 1];
            if sb.len() == 2 {
                let rows = va.len() / k;
                if needs(*a) {
                    let mut da = vec![0.0; rows * k];
                    gemm(rows, n, k, g.data(), false, vb.data(), true, 0.0, &mut da);
                    res.push((*a, Array::new(sa, da)?));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, rows, n, va.data(), true, g.data(), false, 0.0, &mut db);
                    res.push((*b, Array::new(sb, db)?));
                }
            } else {
                let batches = va.len() / (m * k);
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for bi in 0..batches {
                    let gs = &g.data()[bi * m * n..];
                    if needs(*a) {
                        gemm(m, n, k, gs, false, &vb.data()[bi * k * n..], true, 0.0,
                            &mut da[bi * m * k..(bi + 1) * m * k]);
                    }
                    if needs(*b) {
                        gemm(k, m, n, &va.data()[bi * m * k..], true, gs, false, 0.0,
                            &mut db[bi * k * n..(bi + 1) * k * n]);
                    }
                }
                if needs(*a) {
                    res.push((*a, Array::new(sa, da)?));
                }
                if needs(*b) {
                    res.push((*b, Array::new(sb, db)?));
                }
            }
        }
        Op::Transpose(x) => res.push((*x, transpose2(g))),
        Op::Relu(x) => res.push((*x, zip_map(g, val(*x), |g, x| if x > 0.0 { g } else { 0.0 }))),
        Op::Sigmoid(x) => res.push((*x, zip_map(g, out, |g, s| g * s * (1.0 - s)))),
        Op::Log(x) => res.push((*x, zip_map(g, val(*x), |g, x| g / x))),
        Op::Exp(x) => res.push((*x, zip_map(g, out, |g, e| g * e))),
        Op::Abs(x) => res.push((
            *x,
            zip_map(g, val(*x), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }),
        )),
        Op::Powf(x, p) => {
            let p = *p;
            res.push((*x, zip_map(g, val(*x), |g, x| g * p * x.powf(p - 1.0))));
        }
        Op::Sum(x) => res.push((*x, Array::full(val(*x).shape(), g.item()))),
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            res.push((*x, Array::full(val(*x).shape(), g.item() / n)));
        }
        Op::SumAxis { x, axis } => {
            let shape = val(*x).shape();
            let (outer, d, inner) = split_axis(shape, *axis);
            let mut dx = vec![0.0; outer * d * inner];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for a in 0..d {
                    dx[(o * d + a) * inner..(o * d + a + 1) * inner].copy_from_slice(src);
                }
            }
            res.push((*x, Array::new(shape, dx)?));
        }
        Op::Softmax { x, axis } => {
            let (outer, d, inner) = split_axis(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * d + a) * inner + i;
                    let dot: f64 = (0..d).map(|a| gd[at(a)] * y[at(a)]).sum();
                    for a in 0..d {
                        dx[at(a)] = y[at(a)] * (gd[at(a)] - dot);
                    }
                }
            }
            res.push((*x, Array::new(out.shape(), dx)?));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *out.shape().last().expect("rank >= 1");
            let rows = out.len() / d;
            let gam = val(*gamma).data();
            if needs(*gamma) || needs(*beta) {
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (idx, (&gv, &xh)) in g.data().iter().zip(xhat.data()).enumerate() {
                    dg[idx % d] += gv * xh;
                    db[idx % d] += gv;
                }
                res.push((*gamma, Array::new(&[d], dg)?));
                res.push((*beta, Array::new(&[d], db)?));
            }
            if needs(*x) {
                let mut dx = vec![0.0; out.len()];
                for r in 0..rows {
                    let gs = &g.data()[r * d..(r + 1) * d];
                    let xs = &xhat.data()[r * d..(r + 1) * d];
                    let dxhat: Vec<f64> = gs.iter().zip(gam).map(|(g, w)| g * w).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        dx[r * d + c] = rstd[r] * (dxhat[c] - m1 - xs[c] * m2);
                    }
                }
                res.push((*x, Array::new(out.shape(), dx)?));
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &x in xs {
                let shape = val(x).shape();
                let chunk = shape[*axis] * inner;
                if needs(x) {
                    let mut dx = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total * inner + offset;
                        dx.extend_from_slice(&g.data()[base..base + chunk]);
                    }
                    res.push((x, Array::new(shape, dx)?));
                }
                offset += chunk;
            }
        }
        Op::Narrow { x, axis, start } => {
            let shape = val(*x).shape();
            let (outer, d, inner) = split_axis(shape, *axis);
            let len = out.shape()[*axis];
            let mut dx = vec![0.0; outer * d * inner];
            for o in 0..outer {
                let dst = (o * d + start) * inner;
                dx[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            res.push((*x, Array::new(shape, dx)?));
        }
        Op::GatherRows { x, idx } => {
            let shape = val(*x).shape();
            let row = val(*x).len() / shape[0];
            let mut dx = vec![0.0; val(*x).len()];
            for (k, &r) in idx.iter().enumerate() {
                for c in 0..row {
                    dx[r * row + c] += g.data()[k * row + c];
                }
            }
            res.push((*x, Array::new(shape, dx)?));
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let (vx, vw) = (val(*x), val(*w));
            let geom = conv_geom(vx.shape(), vw.shape(), *stride, *pad)?;
            let cout = vw.shape()[0];
            let n = geom.ho * geom.wo;
            let ckk = geom.cin * geom.kh * geom.kw;
            let cols_owned;
            let cols: &[f64] = if geom.is_pointwise() {
                vx.data()
            } else {
                cols_owned = geom.im2col(vx.data());
                &cols_owned
            };
            if needs(*w) {
                let mut dw = vec![0.0; cout * ckk];
                gemm(cout, n, ckk, g.data(), false, cols, true, 0.0, &mut dw);
                res.push((*w, Array::new(vw.shape(), dw)?));
            }
            if let Some(b) = b {
                if needs(*b) {
                    let db = (0..cout).map(|c| g.data()[c * n..(c + 1) * n].iter().sum()).collect();
                    res.push((*b, Array::new(&[cout], db)?));
                }
            }
            if needs(*x) {
                let mut dcols = vec![0.0; ckk * n];
                gemm(ckk, cout, n, vw.data(), true, g.data(), false, 0.0, &mut dcols);
                let dx = if geom.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![0.0; vx.len()];
                    geom.col2im(&dcols, &mut dx);
                    dx
                };
                res.push((*x, Array::new(vx.shape(), dx)?));
            }
        }
        Op::Clamp { x, lo, hi } => {
            let d = lo.len();
            let vx = val(*x);
            let data = g
                .data()
                .iter()
                .zip(vx.data())
                .enumerate()
                .map(|(i, (g, x))| {
                    if *x >= lo[i % d] && *x <= hi[i % d] {
                        *g
                    } else {
                        0.0
                    }
                })
                .collect();
            res.push((*x, Array::new(vx.shape(), data)?));
        }
        Op::Custom { inputs, rule } => {
            let vals: Vec<&Array> = inputs.iter().map(|v| val(*v)).collect();
            let grads = rule.backward(&vals, out, g)?;
            if grads.len() != inputs.len() {
                return Err(Error::Shape(format!(
                    "custom op `{}` returned {} gradients for {} inputs",
                    rule.name(),
                    grads.len(),
                    inputs.len()
                )));
            }
            for (v, gr) in inputs.iter().zip(grads) {
                if let Some(gr) = gr {
                    if needs(*v) {
                        res.push((*v, gr));
                    }
                }
            }
        }
    }
    Ok(res)
}
