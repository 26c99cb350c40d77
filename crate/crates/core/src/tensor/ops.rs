//! Differentiable elementwise, reduction, shape and contraction operations.

use std::rc::Rc;

use super::array::{numel, Tensor};
use super::graph::Var;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

// ---------------------------------------------------------------------------
// Broadcasting

/// Trailing-aligned broadcast of two shapes (numpy rules).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat output positions to flat positions of a broadcast operand.
enum Indexer {
    Identity,
    Scalar,
    /// Operand shape equals the trailing dims of the output.
    Suffix(usize),
    Table(Vec<usize>),
}

impl Indexer {
    fn new(out: &[usize], input: &[usize]) -> Self {
        let n_in = numel(input);
        if out == input {
            return Indexer::Identity;
        }
        if n_in == 1 {
            return Indexer::Scalar;
        }
        let lead = out.len() - input.len();
        if out[lead..] == *input {
            return Indexer::Suffix(n_in);
        }
        // General path: strides of the input expressed in output dims.
        let mut strides = vec![0usize; out.len()];
        let mut s = 1;
        for d in (0..input.len()).rev() {
            if input[d] != 1 {
                strides[d + lead] = s;
            }
            s *= input[d];
        }
        let total = numel(out);
        let mut table = Vec::with_capacity(total);
        let mut counter = vec![0usize; out.len()];
        let mut offset = 0usize;
        for _ in 0..total {
            table.push(offset);
            for d in (0..out.len()).rev() {
                counter[d] += 1;
                offset += strides[d];
                if counter[d] < out[d] {
                    break;
                }
                offset -= strides[d] * out[d];
                counter[d] = 0;
            }
        }
        Indexer::Table(table)
    }

    #[inline]
    fn map(&self, i: usize) -> usize {
        match self {
            Indexer::Identity => i,
            Indexer::Scalar => 0,
            Indexer::Suffix(m) => i % m,
            Indexer::Table(t) => t[i],
        }
    }

    /// Sum per-output contributions back onto the operand's shape.
    fn reduce(&self, contrib: Vec<f64>, shape: &[usize]) -> Tensor {
        match self {
            Indexer::Identity => Tensor::from_parts(shape.to_vec(), contrib),
            _ => {
                let mut acc = vec![0.0; numel(shape)];
                for (i, c) in contrib.into_iter().enumerate() {
                    acc[self.map(i)] += c;
                }
                Tensor::from_parts(shape.to_vec(), acc)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

fn binary<'g>(a: Var<'g>, b: Var<'g>, op: BinaryOp) -> Result<Var<'g>> {
    let av = a.value();
    let bv = b.value();
    let out_shape = broadcast_shape(av.shape(), bv.shape())
        .ok_or_else(|| Error::shape(op.name(), av.shape(), bv.shape()))?;
    let ia = Indexer::new(&out_shape, av.shape());
    let ib = Indexer::new(&out_shape, bv.shape());
    let n = numel(&out_shape);
    let (ad, bd) = (av.data(), bv.data());
    let data: Vec<f64> = match (&ia, &ib) {
        (Indexer::Identity, Indexer::Identity) => {
            ad.iter().zip(bd).map(|(&x, &y)| op.apply(x, y)).collect()
        }
        _ => (0..n).map(|i| op.apply(ad[ia.map(i)], bd[ib.map(i)])).collect(),
    };
    let value = Tensor::from_parts(out_shape, data);
    let (a_req, b_req) = (a.requires_grad(), b.requires_grad());
    a.graph().record(op.name(), &[a, b], value, move |g| {
        let gd = g.data();
        let (ad, bd) = (av.data(), bv.data());
        let ga = a_req.then(|| {
            let contrib: Vec<f64> = match op {
                BinaryOp::Add | BinaryOp::Sub => gd.to_vec(),
                BinaryOp::Mul => (0..n).map(|i| gd[i] * bd[ib.map(i)]).collect(),
                BinaryOp::Div => (0..n).map(|i| gd[i] / bd[ib.map(i)]).collect(),
            };
            ia.reduce(contrib, av.shape())
        });
        let gb = b_req.then(|| {
            let contrib: Vec<f64> = match op {
                BinaryOp::Add => gd.to_vec(),
                BinaryOp::Sub => gd.iter().map(|v| -v).collect(),
                BinaryOp::Mul => (0..n).map(|i| gd[i] * ad[ia.map(i)]).collect(),
                BinaryOp::Div => (0..n)
                    .map(|i| {
                        let y = bd[ib.map(i)];
                        -gd[i] * ad[ia.map(i)] / (y * y)
                    })
                    .collect(),
            };
            ib.reduce(contrib, bv.shape())
        });
        vec![ga, gb]
    })
}

// ---------------------------------------------------------------------------
// Unary

fn unary<'g>(
    x: Var<'g>,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    // derivative as a function of (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Var<'g>> {
    let xv = x.value();
    let value = xv.map(f);
    let yv = Rc::new(value.clone());
    x.graph().record(op, &[x], value, move |g| {
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .zip(yv.data())
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(Tensor::from_parts(xv.shape().to_vec(), data))]
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        binary(self, other, BinaryOp::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        binary(self, other, BinaryOp::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        binary(self, other, BinaryOp::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        binary(self, other, BinaryOp::Div)
    }

    pub fn binary(self, other: Var<'g>, op: BinaryOp) -> Result<Var<'g>> {
        binary(self, other, op)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        unary(self, "add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'g>> {
        unary(self, "mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.mul_scalar(-1.0)
    }

    /// Subgradient at 0 is 0.
    pub fn relu(self) -> Result<Var<'g>> {
        unary(self, "relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'g>> {
        unary(
            self,
            "leaky_relu",
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn lrelu(self) -> Result<Var<'g>> {
        self.leaky_relu(LEAKY_SLOPE)
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        unary(self, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// tanh approximation of GELU.
    pub fn gelu(self) -> Result<Var<'g>> {
        unary(self, "gelu", gelu, |x, _| gelu_grad(x))
    }

    /// Subgradient at 0 is 0.
    pub fn abs(self) -> Result<Var<'g>> {
        unary(self, "abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(self) -> Result<Var<'g>> {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'g>> {
        unary(self, "ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Result<Var<'g>> {
        unary(self, "square", |x| x * x, |x, _| 2.0 * x)
    }

    // -----------------------------------------------------------------------
    // Reductions

    pub fn sum(self) -> Result<Var<'g>> {
        let xv = self.value();
        let value = Tensor::scalar(xv.sum());
        self.graph().record("sum", &[self], value, move |g| {
            vec![Some(Tensor::full(xv.shape(), g.data()[0]))]
        })
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let xv = self.value();
        let n = xv.numel().max(1) as f64;
        let value = Tensor::scalar(xv.sum() / n);
        self.graph().record("mean", &[self], value, move |g| {
            vec![Some(Tensor::full(xv.shape(), g.data()[0] / n))]
        })
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid_shape("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::from_parts(out_shape, out);
        self.graph().record("sum_axis", &[self], value, move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    // -----------------------------------------------------------------------
    // Shape manipulation

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let xv = self.value();
        if numel(shape) != xv.numel() {
            return Err(Error::shape("reshape", xv.shape(), shape));
        }
        let in_shape = xv.shape().to_vec();
        let value = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        self.graph().record("reshape", &[self], value, move |g| {
            vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]
        })
    }

    /// General axis permutation: `out.shape[i] = in.shape[axes[i]]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid_shape("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let value = permute_tensor(&xv, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph().record("permute", &[self], value, move |g| {
            vec![Some(permute_tensor(g, &inverse))]
        })
    }

    /// Range `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid_shape(
                "narrow",
                format!("axis {axis} range {start}..{} for {shape:?}", start + len),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        let d = xv.data();
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        self.graph().record("narrow", &[self], value, move |g| {
            let mut gx = vec![0.0; numel(&shape)];
            let gd = g.data();
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Gather slices along `axis` at `indices` (repeats allowed).
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::invalid_shape(
                "index_select",
                format!("axis {axis} indices out of range for {shape:?}"),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let k = indices.len();
        let mut data = Vec::with_capacity(outer * k * inner);
        let d = xv.data();
        for o in 0..outer {
            for &i in indices {
                let base = (o * full + i) * inner;
                data.extend_from_slice(&d[base..base + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = k;
        let value = Tensor::from_parts(out_shape, data);
        let indices = indices.to_vec();
        self.graph().record("index_select", &[self], value, move |g| {
            let mut gx = vec![0.0; numel(&shape)];
            let gd = g.data();
            for o in 0..outer {
                for (j, &i) in indices.iter().enumerate() {
                    let src = (o * k + j) * inner;
                    let dst = (o * full + i) * inner;
                    for c in 0..inner {
                        gx[dst + c] += gd[src + c];
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    // -----------------------------------------------------------------------
    // Contractions and normalizations

    /// Batched matrix product `[.., m, k] x [.., k, n]`. The right operand
    /// may also be a single `[k, n]` matrix shared across the batch.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let av = self.value();
        let bv = other.value();
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch = numel(&sa[..sa.len() - 2]);
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        if shared {
            // Fold the batch into rows.
            gemm(batch * m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        } else {
            for b in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av.data()[b * m * k..],
                    false,
                    &bv.data()[b * k * n..],
                    false,
                    &mut out[b * m * n..],
                    0.0,
                );
            }
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let value = Tensor::from_parts(out_shape, out);
        let (a_req, b_req) = (self.requires_grad(), other.requires_grad());
        self.graph().record("matmul", &[self, other], value, move |g| {
            let gd = g.data();
            let ga = a_req.then(|| {
                let mut ga = vec![0.0; batch * m * k];
                if shared {
                    gemm(batch * m, n, k, gd, false, bv.data(), true, &mut ga, 0.0);
                } else {
                    for b in 0..batch {
                        gemm(m, n, k, &gd[b * m * n..], false, &bv.data()[b * k * n..], true, &mut ga[b * m * k..], 0.0);
                    }
                }
                Tensor::from_parts(sa.clone(), ga)
            });
            let gb = b_req.then(|| {
                let mut gb = vec![0.0; numel(&sb)];
                if shared {
                    gemm(k, batch * m, n, av.data(), true, gd, false, &mut gb, 0.0);
                } else {
                    for b in 0..batch {
                        gemm(k, m, n, &av.data()[b * m * k..], true, &gd[b * m * n..], false, &mut gb[b * k * n..], 0.0);
                    }
                }
                Tensor::from_parts(sb.clone(), gb)
            });
            vec![ga, gb]
        })
    }

    /// Softmax over the last axis, computed with per-row max subtraction.
    pub fn softmax(self) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let len = *shape.last().ok_or_else(|| Error::invalid_shape("softmax", "scalar input"))?;
        let mut y = xv.data().to_vec();
        for row in y.chunks_mut(len) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let yv = Rc::new(Tensor::from_parts(shape.clone(), y.clone()));
        let value = Tensor::from_parts(shape.clone(), y);
        self.graph().record("softmax", &[self], value, move |g| {
            let mut gx = vec![0.0; yv.numel()];
            for ((gr, yr), out) in g
                .data()
                .chunks(len)
                .zip(yv.data().chunks(len))
                .zip(gx.chunks_mut(len))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for i in 0..len {
                    out[i] = yr[i] * (gr[i] - dot);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Normalize each last-axis row to zero mean and unit (biased) variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let len = *shape.last().ok_or_else(|| Error::invalid_shape("layer_norm", "scalar input"))?;
        let rows = xv.numel() / len.max(1);
        let mut y = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (xr, yr)) in xv.data().chunks(len).zip(y.chunks_mut(len)).enumerate() {
            let mean = xr.iter().sum::<f64>() / len as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..len {
                yr[i] = (xr[i] - mean) * is;
            }
        }
        let yv = Rc::new(Tensor::from_parts(shape.clone(), y.clone()));
        let value = Tensor::from_parts(shape.clone(), y);
        self.graph().record("layer_norm", &[self], value, move |g| {
            let mut gx = vec![0.0; yv.numel()];
            let n = len as f64;
            for (r, ((gr, yr), out)) in g
                .data()
                .chunks(len)
                .zip(yv.data().chunks(len))
                .zip(gx.chunks_mut(len))
                .enumerate()
            {
                let mean_g = gr.iter().sum::<f64>() / n;
                let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                for i in 0..len {
                    out[i] = inv_std[r] * (gr[i] - mean_g - yr[i] * mean_gy);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<'g>(vars: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = vars
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::invalid_shape("concat", format!("axis {axis} for {base:?}")));
    }
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
            return Err(Error::shape("concat", &base, s));
        }
    }
    let outer = numel(&base[..axis]);
    let inner = numel(&base[axis + 1..]);
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let value = Tensor::from_parts(out_shape, data);
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    let reqs: Vec<bool> = vars.iter().map(|v| v.requires_grad()).collect();
    first.graph().record("concat", vars, value, move |g| {
        let gd = g.data();
        let mut out = Vec::with_capacity(lens.len());
        let mut offset = 0;
        for (j, &l) in lens.iter().enumerate() {
            if !reqs[j] {
                out.push(None);
                offset += l;
                continue;
            }
            let mut gx = Vec::with_capacity(outer * l * inner);
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                gx.extend_from_slice(&gd[start..start + l * inner]);
            }
            out.push(Some(Tensor::from_parts(shapes[j].clone(), gx)));
            offset += l;
        }
        out
    })
}

pub fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = x.numel();
    let mut data = Vec::with_capacity(total);
    let src = x.data();
    if nd == 0 {
        return x.clone();
    }
    // Innermost loop unrolled over the last output axis.
    let last = out_shape[nd - 1];
    let last_stride = strides[nd - 1];
    let mut counter = vec![0usize; nd - 1];
    let mut offset = 0usize;
    let outer = total / last.max(1);
    for _ in 0..outer {
        for j in 0..last {
            data.push(src[offset + j * last_stride]);
        }
        for d in (0..nd - 1).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

/// `c = a·b + beta·c` for row-major operands, either optionally transposed.
/// `a` is `m×k` (or `k×m` stored when `ta`), `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every element addressed by the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_small_vectors() {
        let g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_annihilates_value_and_grad() {
        let g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 5.0]));
        let z = g.constant(Tensor::scalar(0.0));
        let y = x.mul(z).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);
        g.backward(y.sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_at_and_below_zero() {
        let g = Graph::new();
        let x = g.param(t(&[3], &[-1.5, 0.0, 2.0]));
        let y = x.relu().unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        g.backward(y.sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn broadcast_scalar_equals_explicit_expansion() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.constant(Tensor::scalar(2.5));
        let e = g.constant(Tensor::full(&[2, 2], 2.5));
        assert_eq!(*a.mul(s).unwrap().value(), *a.mul(e).unwrap().value());
    }

    #[test]
    fn broadcast_over_trailing_unit_axis() {
        let g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let m = g.param(t(&[2, 1], &[2.0, -1.0]));
        let y = x.mul(m).unwrap();
        assert_eq!(y.value().data(), &[0.0, 2.0, 4.0, -3.0, -4.0, -5.0]);
        g.backward(y.sum().unwrap()).unwrap();
        assert_eq!(m.grad().unwrap().data(), &[3.0, 12.0]);
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0, 2.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn matmul_hand_case_and_identity() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
        let v = g.constant(t(&[3, 1], &[0.5, -1.0, 2.0]));
        let i = g.constant(Tensor::eye(3));
        assert_eq!(i.matmul(v).unwrap().value().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn quadratic_gradient_is_twice_x() {
        let g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        g.backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        g.backward(x.sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        assert_eq!(permute_tensor(&p, &[1, 2, 0]), x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.7).sin() * 30.0));
        let y = x.softmax().unwrap().value();
        for row in y.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[4, 8], |i| (i as f64).cos() * 3.0 + 1.0));
        let y = x.layer_norm(0.0).unwrap().value();
        for row in y.data().chunks(8) {
            let m = row.iter().sum::<f64>() / 8.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
        }
    }
}
