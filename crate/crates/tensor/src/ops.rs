//! Primitive operations: forward evaluation on [`Var`] and the matching adjoints.

use crate::conv;
use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Scalar};
use crate::tape::{Node, Var};
use crate::tensor::{numel, Tensor};

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddConst(usize),
    MulConst(usize, T),
    Log(usize),
    Exp(usize),
    Tanh(usize),
    Sqrt(usize),
    Abs(usize),
    Relu(usize),
    ClampMin(usize, T),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    BroadcastTo(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    MaxAxis {
        input: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    NormL1(usize, usize),
    NormL2(usize, usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Select {
        input: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    ChannelBias(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geometry: conv::Geometry,
        cols: Vec<T>,
    },
    ChannelSoftmax(usize),
    SpatialMax {
        input: usize,
        argmax: Vec<usize>,
    },
    LogSoftmax(usize),
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddConst(..) => "add_scalar",
            Op::MulConst(..) => "mul_scalar",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::MaxAxis { .. } => "max_axis",
            Op::NormL1(..) => "norm_l1",
            Op::NormL2(..) => "norm_l2",
            Op::Concat { .. } => "concat",
            Op::Select { .. } => "select",
            Op::ChannelBias(..) => "add_channel_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelSoftmax(..) => "channel_softmax",
            Op::SpatialMax { .. } => "spatial_max",
            Op::LogSoftmax(..) => "log_softmax",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Matmul(a, b)
            | Op::ChannelBias(a, b) => vec![*a, *b],
            Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::ClampMin(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::NormL1(a, _)
            | Op::NormL2(a, _)
            | Op::ChannelSoftmax(a)
            | Op::LogSoftmax(a) => vec![*a],
            Op::MaxAxis { input, .. } | Op::Select { input, .. } | Op::SpatialMax { input, .. } => {
                vec![*input]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
        }
    }
}

/// `(outer, len, inner)` strides for iterating one axis of a row-major shape.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::dim(
            op,
            format!("axis {axis}"),
            format!("tensor has rank {}", shape.len()),
        ));
    }
    Ok(())
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    out.remove(axis);
    out
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t, T: Scalar> Var<'t, T> {
    fn check_same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(self, other: Var<'t, T>, kind: BinKind) -> Result<Var<'t, T>> {
        self.check_same_tape(&other);
        let a = self.value();
        let b = other.value();
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let shape = if a.shape() == b.shape() {
            a.shape().to_vec()
        } else if a.rank() == 0 {
            b.shape().to_vec()
        } else if b.rank() == 0 {
            a.shape().to_vec()
        } else {
            return Err(TensorError::dim(
                name,
                "all",
                format!("{:?} vs {:?} (only scalar broadcasting)", a.shape(), b.shape()),
            ));
        };
        let n = numel(&shape);
        let (sa, sb) = (a.numel() == n, b.numel() == n);
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<T> = (0..n)
            .map(|i| {
                let x = ad[if sa { i } else { 0 }];
                let y = bd[if sb { i } else { 0 }];
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                }
            })
            .collect();
        let op = match kind {
            BinKind::Add => Op::Add(self.id, other.id),
            BinKind::Sub => Op::Sub(self.id, other.id),
            BinKind::Mul => Op::Mul(self.id, other.id),
            BinKind::Div => Op::Div(self.id, other.id),
        };
        self.tape.push(Tensor::new(shape, data)?, op)
    }

    /// Elementwise sum. Shapes must match exactly unless one side is a scalar.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Div)
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var<'t, T>> {
        let out = self.value().map(f);
        self.tape.push(out, op)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        self.unary(Op::AddConst(self.id), |x| x + c)
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        self.unary(Op::MulConst(self.id, c), |x| x * c)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.mul_scalar(-1.0)
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        self.unary(Op::Log(self.id), |x| x.ln())
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary(Op::Tanh(self.id), |x| x.tanh())
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary(Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        self.unary(Op::Abs(self.id), |x| x.abs())
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(Op::Relu(self.id), |x| if x > T::zero() { x } else { T::zero() })
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(self, floor: f64) -> Result<Var<'t, T>> {
        let floor = T::of(floor);
        self.unary(Op::ClampMin(self.id, floor), |x| if x > floor { x } else { floor })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_tape(&other);
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::dim(
                "matmul",
                "inner",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        self.tape
            .push(Tensor::new(vec![m, n], out)?, Op::Matmul(self.id, other.id))
    }

    /// 2-D transpose.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(TensorError::dim(
                "transpose",
                "rank",
                format!("expected rank 2, got {:?}", a.shape()),
            ));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let d = a.data();
        let out: Vec<T> = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        self.tape
            .push(Tensor::new(vec![c, r], out)?, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let out = (*a).clone().reshaped(shape)?;
        self.tape.push(out, Op::Reshape(self.id))
    }

    /// Explicit expansion: every source axis must be 1 or equal to the target,
    /// or the source must be a scalar.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let strides = broadcast_strides(a.shape(), shape)?;
        let d = a.data();
        let mut out = Vec::with_capacity(numel(shape));
        for_each_index(shape, |src_offset| out.push(d[src_offset]), &strides);
        self.tape
            .push(Tensor::new(shape.to_vec(), out)?, Op::BroadcastTo(self.id))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let a = self.value();
        let name = if mean { "mean_axis" } else { "sum_axis" };
        check_axis(name, a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let d = a.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &d[(o * n + i) * inner..(o * n + i + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (x, y) in dst.iter_mut().zip(src) {
                    *x = *x + *y;
                }
            }
        }
        if mean {
            let scale = T::one() / T::of(n as f64);
            out.iter_mut().for_each(|x| *x = *x * scale);
        }
        let op = if mean {
            Op::MeanAxis(self.id, axis)
        } else {
            Op::SumAxis(self.id, axis)
        };
        self.tape
            .push(Tensor::new(removed_axis(a.shape(), axis), out)?, op)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, true)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let s: T = self.value().data().iter().copied().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.numel() == 0 {
            return Err(TensorError::Contract("mean of empty tensor".into()));
        }
        let s: T = a.data().iter().copied().sum();
        let m = s / T::of(a.numel() as f64);
        self.tape.push(Tensor::scalar(m), Op::MeanAll(self.id))
    }

    /// Maximum along `axis`, with the index of the first maximal entry.
    pub fn max_axis(self, axis: usize) -> Result<(Var<'t, T>, Vec<usize>)> {
        let a = self.value();
        check_axis("max_axis", a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        if n == 0 {
            return Err(TensorError::dim("max_axis", format!("axis {axis}"), "empty axis"));
        }
        let d = a.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = 0;
                let mut best_v = d[o * n * inner + j];
                for i in 1..n {
                    let v = d[(o * n + i) * inner + j];
                    if v > best_v {
                        best = i;
                        best_v = v;
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
        let shape = removed_axis(a.shape(), axis);
        let var = self.tape.push(
            Tensor::new(shape, out)?,
            Op::MaxAxis {
                input: self.id,
                axis,
                argmax: argmax.clone(),
            },
        )?;
        Ok((var, argmax))
    }

    fn norm_axis(self, axis: usize, l2: bool) -> Result<Var<'t, T>> {
        let a = self.value();
        let name = if l2 { "norm_l2" } else { "norm_l1" };
        check_axis(name, a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let d = a.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    let v = d[(o * n + i) * inner + j];
                    let acc = &mut out[o * inner + j];
                    *acc = *acc + if l2 { v * v } else { v.abs() };
                }
            }
        }
        if l2 {
            out.iter_mut().for_each(|x| *x = x.sqrt());
        }
        let op = if l2 {
            Op::NormL2(self.id, axis)
        } else {
            Op::NormL1(self.id, axis)
        };
        self.tape
            .push(Tensor::new(removed_axis(a.shape(), axis), out)?, op)
    }

    pub fn norm_l1(self, axis: usize) -> Result<Var<'t, T>> {
        self.norm_axis(axis, false)
    }

    /// Euclidean norm along `axis`. At a zero norm the adjoint is taken as 0.
    pub fn norm_l2(self, axis: usize) -> Result<Var<'t, T>> {
        self.norm_axis(axis, true)
    }

    /// Gather `indices` along `axis`.
    pub fn select(self, axis: usize, indices: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        check_axis("select", a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::dim(
                "select",
                format!("axis {axis}"),
                format!("index {bad} out of range {n}"),
            ));
        }
        let d = a.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&d[(o * n + i) * inner..(o * n + i + 1) * inner]);
            }
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = indices.len();
        self.tape.push(
            Tensor::new(shape, out)?,
            Op::Select {
                input: self.id,
                axis,
                indices: indices.to_vec(),
            },
        )
    }

    /// `x[b, c, ...] + bias[c]` for `x` of rank >= 2.
    pub fn add_channel_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_tape(&bias);
        let x = self.value();
        let b = bias.value();
        if x.rank() < 2 || b.shape() != [x.shape()[1]] {
            return Err(TensorError::dim(
                "add_channel_bias",
                "axis 1",
                format!("{:?} with bias {:?}", x.shape(), b.shape()),
            ));
        }
        let (outer, c, inner) = axis_split(x.shape(), 1);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let off = (o * c + ch) * inner;
                for v in &mut out[off..off + inner] {
                    *v = *v + b.data()[ch];
                }
            }
        }
        self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::ChannelBias(self.id, bias.id),
        )
    }

    /// Cross-correlation of `[B, C, H, W]` with `[K, C, kh, kw]`, zero padding.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        self.check_same_tape(&kernel);
        let x = self.value();
        let k = kernel.value();
        let geometry = conv::Geometry::new(x.shape(), k.shape(), stride, padding)?;
        let (out, cols) = conv::forward(&geometry, x.data(), k.data());
        self.tape.push(
            Tensor::new(geometry.output_shape().to_vec(), out)?,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geometry,
                cols,
            },
        )
    }

    /// Softmax over axis 1 of a `[B, D, H, W]` map, independently per location.
    pub fn channel_softmax(self) -> Result<Var<'t, T>> {
        let z = self.value();
        if z.rank() != 4 || z.shape()[1] == 0 {
            return Err(TensorError::dim(
                "channel_softmax",
                "axis 1",
                format!("expected [B, D>=1, H, W], got {:?}", z.shape()),
            ));
        }
        if !z.is_finite() {
            return Err(TensorError::NonFinite {
                op: "channel_softmax",
            });
        }
        let (outer, dn, inner) = axis_split(z.shape(), 1);
        let d = z.data();
        let mut out = vec![T::zero(); d.len()];
        let mut buf = vec![T::zero(); dn];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * dn * inner + j;
                let mut m = T::neg_infinity();
                for c in 0..dn {
                    m = m.max(d[base + c * inner]);
                }
                let mut s = T::zero();
                for c in 0..dn {
                    buf[c] = (d[base + c * inner] - m).exp();
                    s = s + buf[c];
                }
                for c in 0..dn {
                    out[base + c * inner] = buf[c] / s;
                }
            }
        }
        self.tape.push(
            Tensor::new(z.shape().to_vec(), out)?,
            Op::ChannelSoftmax(self.id),
        )
    }

    /// Maximum over the spatial axes of `[B, D, H, W]`, yielding `[B, D]`.
    /// Ties resolve to the first location in row-major order.
    pub fn spatial_max(self) -> Result<Var<'t, T>> {
        let (var, _) = self.spatial_max_with_index()?;
        Ok(var)
    }

    /// Like [`Var::spatial_max`], also returning the flat `h * W + w` argmax.
    pub fn spatial_max_with_index(self) -> Result<(Var<'t, T>, Vec<usize>)> {
        let z = self.value();
        if z.rank() != 4 || z.shape()[2] == 0 || z.shape()[3] == 0 {
            return Err(TensorError::dim(
                "spatial_max",
                "axes 2,3",
                format!("expected [B, D, H>=1, W>=1], got {:?}", z.shape()),
            ));
        }
        let (b, dn) = (z.shape()[0], z.shape()[1]);
        let hw = z.shape()[2] * z.shape()[3];
        let d = z.data();
        let mut out = Vec::with_capacity(b * dn);
        let mut argmax = Vec::with_capacity(b * dn);
        for plane in d.chunks_exact(hw) {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            argmax.push(best);
        }
        let var = self.tape.push(
            Tensor::new(vec![b, dn], out)?,
            Op::SpatialMax {
                input: self.id,
                argmax: argmax.clone(),
            },
        )?;
        Ok((var, argmax))
    }

    /// Row-wise log-softmax of a `[N, K]` matrix.
    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.rank() != 2 || a.shape()[1] == 0 {
            return Err(TensorError::dim(
                "log_softmax",
                "axis 1",
                format!("expected [N, K>=1], got {:?}", a.shape()),
            ));
        }
        let k = a.shape()[1];
        let mut out = Vec::with_capacity(a.numel());
        for row in a.data().chunks_exact(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        self.tape.push(
            Tensor::new(a.shape().to_vec(), out)?,
            Op::LogSoftmax(self.id),
        )
    }
}

/// Concatenate along `axis`; all other axes must agree.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    check_axis("concat", &base, axis)?;
    for v in &values {
        let s = v.shape();
        let same = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !same {
            return Err(TensorError::dim(
                "concat",
                format!("all but axis {axis}"),
                format!("{:?} vs {:?}", s, base),
            ));
        }
    }
    let outer = numel(&base[..axis]);
    let inner = numel(&base[axis + 1..]);
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let n = v.shape()[axis];
            out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    first.tape.push(
        Tensor::new(shape, out)?,
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
    )
}

fn broadcast_strides(src: &[usize], dst: &[usize]) -> Result<Vec<usize>> {
    if src.is_empty() || numel(src) == 1 && src.iter().all(|&d| d == 1) && src.len() != dst.len() {
        return Ok(vec![0; dst.len()]);
    }
    if src.len() != dst.len() {
        return Err(TensorError::dim(
            "broadcast_to",
            "rank",
            format!("{:?} -> {:?}", src, dst),
        ));
    }
    let mut strides = vec![0; src.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] == dst[i] {
            strides[i] = acc;
        } else if src[i] == 1 {
            strides[i] = 0;
        } else {
            return Err(TensorError::dim(
                "broadcast_to",
                format!("axis {i}"),
                format!("{:?} -> {:?}", src, dst),
            ));
        }
        acc *= src[i];
    }
    Ok(strides)
}

/// Visit every index of `shape` in row-major order, passing the offset under `strides`.
fn for_each_index(shape: &[usize], mut f: impl FnMut(usize), strides: &[usize]) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        f(offset);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            offset -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn grad_slot<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

/// Accumulate `f(i)` into the gradient of `id` for every element.
fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl Fn(usize) -> T,
) {
    if let Some(slot) = grad_slot(nodes, grads, id) {
        for (i, v) in slot.iter_mut().enumerate() {
            *v = *v + f(i);
        }
    }
}

/// Accumulate a gradient coming from a (possibly scalar-broadcast) binary operand.
fn accumulate_broadcast<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    out_len: usize,
    f: impl Fn(usize) -> T,
) {
    if let Some(slot) = grad_slot(nodes, grads, id) {
        if slot.len() == out_len {
            for (i, v) in slot.iter_mut().enumerate() {
                *v = *v + f(i);
            }
        } else {
            let s: T = (0..out_len).map(f).sum();
            slot[0] = slot[0] + s;
        }
    }
}

pub(crate) fn backward_op<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let out = &node.value;
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let bin = |id: usize, i: usize| -> T {
        let d = nodes[id].value.data();
        if d.len() == g.len() {
            d[i]
        } else {
            d[0]
        }
    };
    let n = g.len();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_broadcast(nodes, grads, *a, n, |i| g[i]);
            accumulate_broadcast(nodes, grads, *b, n, |i| g[i]);
        }
        Op::Sub(a, b) => {
            accumulate_broadcast(nodes, grads, *a, n, |i| g[i]);
            accumulate_broadcast(nodes, grads, *b, n, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            accumulate_broadcast(nodes, grads, *a, n, |i| g[i] * bin(*b, i));
            accumulate_broadcast(nodes, grads, *b, n, |i| g[i] * bin(*a, i));
        }
        Op::Div(a, b) => {
            accumulate_broadcast(nodes, grads, *a, n, |i| g[i] / bin(*b, i));
            accumulate_broadcast(nodes, grads, *b, n, |i| {
                let y = bin(*b, i);
                -g[i] * bin(*a, i) / (y * y)
            });
        }
        Op::AddConst(a) => accumulate(nodes, grads, *a, |i| g[i]),
        Op::MulConst(a, c) => accumulate(nodes, grads, *a, |i| g[i] * *c),
        Op::Log(a) => {
            let x = val(*a).data();
            accumulate(nodes, grads, *a, |i| g[i] / x[i]);
        }
        Op::Exp(a) => {
            let y = out.data();
            accumulate(nodes, grads, *a, |i| g[i] * y[i]);
        }
        Op::Tanh(a) => {
            let y = out.data();
            accumulate(nodes, grads, *a, |i| g[i] * (T::one() - y[i] * y[i]));
        }
        Op::Sqrt(a) => {
            let y = out.data();
            accumulate(nodes, grads, *a, |i| g[i] / (y[i] + y[i]));
        }
        Op::Abs(a) => {
            let x = val(*a).data();
            accumulate(nodes, grads, *a, |i| {
                if x[i] > T::zero() {
                    g[i]
                } else if x[i] < T::zero() {
                    -g[i]
                } else {
                    T::zero()
                }
            });
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            accumulate(nodes, grads, *a, |i| {
                if x[i] > T::zero() {
                    g[i]
                } else {
                    T::zero()
                }
            });
        }
        Op::ClampMin(a, floor) => {
            let x = val(*a).data();
            accumulate(nodes, grads, *a, |i| {
                if x[i] > *floor {
                    g[i]
                } else {
                    T::zero()
                }
            });
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, nn) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(slot) = grad_slot(nodes, grads, *a) {
                // dA = G * B^T
                gemm(m, nn, k, g, false, bv.data(), true, slot, true);
            }
            if let Some(slot) = grad_slot(nodes, grads, *b) {
                // dB = A^T * G
                gemm(k, m, nn, av.data(), true, g, false, slot, true);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            // out is [c, r]; input is [r, c]
            accumulate(nodes, grads, *a, |i| g[(i % c) * r + i / c]);
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |i| g[i]),
        Op::BroadcastTo(a) => {
            let src_shape = val(*a).shape().to_vec();
            let strides = broadcast_strides(&src_shape, out.shape()).expect("checked in forward");
            if let Some(slot) = grad_slot(nodes, grads, *a) {
                let mut k = 0;
                for_each_index(
                    out.shape(),
                    |off| {
                        slot[off] = slot[off] + g[k];
                        k += 1;
                    },
                    &strides,
                );
            }
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let (_, len, inner) = axis_split(val(*a).shape(), *axis);
            let scale = if matches!(node.op, Op::MeanAxis(..)) {
                T::one() / T::of(len as f64)
            } else {
                T::one()
            };
            accumulate(nodes, grads, *a, |i| {
                let o = i / (len * inner);
                let j = i % inner;
                g[o * inner + j] * scale
            });
        }
        Op::SumAll(a) => accumulate(nodes, grads, *a, |_| g[0]),
        Op::MeanAll(a) => {
            let scale = g[0] / T::of(val(*a).numel() as f64);
            accumulate(nodes, grads, *a, |_| scale);
        }
        Op::MaxAxis {
            input,
            axis,
            argmax,
        } => {
            let (_, len, inner) = axis_split(val(*input).shape(), *axis);
            if let Some(slot) = grad_slot(nodes, grads, *input) {
                for (k, &best) in argmax.iter().enumerate() {
                    let o = k / inner;
                    let j = k % inner;
                    let idx = (o * len + best) * inner + j;
                    slot[idx] = slot[idx] + g[k];
                }
            }
        }
        Op::NormL1(a, axis) => {
            let x = val(*a).data();
            let (_, len, inner) = axis_split(val(*a).shape(), *axis);
            accumulate(nodes, grads, *a, |i| {
                let gi = g[(i / (len * inner)) * inner + i % inner];
                if x[i] > T::zero() {
                    gi
                } else if x[i] < T::zero() {
                    -gi
                } else {
                    T::zero()
                }
            });
        }
        Op::NormL2(a, axis) => {
            let x = val(*a).data();
            let y = out.data();
            let (_, len, inner) = axis_split(val(*a).shape(), *axis);
            accumulate(nodes, grads, *a, |i| {
                let k = (i / (len * inner)) * inner + i % inner;
                if y[k] > T::zero() {
                    g[k] * x[i] / y[k]
                } else {
                    T::zero()
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let outer = numel(&shape[..*axis]);
            let inner = numel(&shape[*axis + 1..]);
            let total = shape[*axis];
            let mut offset = 0;
            for &id in inputs {
                let len = val(id).shape()[*axis];
                if let Some(slot) = grad_slot(nodes, grads, id) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut slot[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Select {
            input,
            axis,
            indices,
        } => {
            let (outer, len, inner) = axis_split(val(*input).shape(), *axis);
            if let Some(slot) = grad_slot(nodes, grads, *input) {
                let m = indices.len();
                for o in 0..outer {
                    for (k, &i) in indices.iter().enumerate() {
                        let src = &g[(o * m + k) * inner..(o * m + k + 1) * inner];
                        let dst = &mut slot[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
        Op::ChannelBias(x, b) => {
            accumulate(nodes, grads, *x, |i| g[i]);
            let (outer, c, inner) = axis_split(out.shape(), 1);
            if let Some(slot) = grad_slot(nodes, grads, *b) {
                for o in 0..outer {
                    for (ch, s) in slot.iter_mut().enumerate().take(c) {
                        let off = (o * c + ch) * inner;
                        *s = *s + g[off..off + inner].iter().copied().sum::<T>();
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            geometry,
            cols,
        } => {
            let kv = val(*kernel);
            if let Some(slot) = grad_slot(nodes, grads, *kernel) {
                conv::backward_kernel(geometry, g, cols, slot);
            }
            if let Some(slot) = grad_slot(nodes, grads, *input) {
                conv::backward_input(geometry, g, kv.data(), slot);
            }
        }
        Op::ChannelSoftmax(a) => {
            let y = out.data();
            let (outer, dn, inner) = axis_split(out.shape(), 1);
            if let Some(slot) = grad_slot(nodes, grads, *a) {
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * dn * inner + j;
                        let mut dot = T::zero();
                        for c in 0..dn {
                            dot = dot + g[base + c * inner] * y[base + c * inner];
                        }
                        for c in 0..dn {
                            let idx = base + c * inner;
                            slot[idx] = slot[idx] + y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
        }
        Op::SpatialMax { input, argmax } => {
            let shape = val(*input).shape();
            let hw = shape[2] * shape[3];
            if let Some(slot) = grad_slot(nodes, grads, *input) {
                for (k, &best) in argmax.iter().enumerate() {
                    let idx = k * hw + best;
                    slot[idx] = slot[idx] + g[k];
                }
            }
        }
        Op::LogSoftmax(a) => {
            let y = out.data();
            let k = out.shape()[1];
            if let Some(slot) = grad_slot(nodes, grads, *a) {
                for r in 0..out.shape()[0] {
                    let row = r * k..(r + 1) * k;
                    let gs: T = g[row.clone()].iter().copied().sum();
                    for i in row {
                        slot[i] = slot[i] + g[i] - y[i].exp() * gs;
                    }
                }
            }
        }
    }
}
