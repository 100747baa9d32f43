//! Forward and vector-Jacobian kernels for each primitive.

use super::array::{split_axis, strides_of};
use super::{Element, Op, Result, Tensor, TensorError};

fn mismatch(op: &'static str, expected: impl Into<String>, actual: impl std::fmt::Debug) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.into(),
        actual: format!("{actual:?}"),
    }
}

fn c<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::BadAttribute {
            op,
            reason: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

fn tensor<T: Element>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced consistent shape")
}

/// Shape bookkeeping for `MatMul`.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>)> {
    let (ra, rb) = (a.len(), b.len());
    if ra < 2 || rb < 2 {
        return Err(mismatch("matmul", "rank >= 2 operands", (a, b)));
    }
    let k = a[ra - 1];
    if b[rb - 2] != k {
        return Err(mismatch("matmul", format!("rhs leading extent {k}"), (a, b)));
    }
    let n = b[rb - 1];
    let mut out = a[..ra - 1].to_vec();
    out.push(n);
    if rb == 2 {
        let m = a[..ra - 1].iter().product();
        return Ok((
            MatMulDims {
                batch: 1,
                m,
                k,
                n,
                shared_rhs: true,
            },
            out,
        ));
    }
    if ra != rb || a[..ra - 2] != b[..rb - 2] {
        return Err(mismatch("matmul", "matching batch axes", (a, b)));
    }
    Ok((
        MatMulDims {
            batch: a[..ra - 2].iter().product(),
            m: a[ra - 2],
            k,
            n,
            shared_rhs: false,
        },
        out,
    ))
}

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(mismatch(op, format!("rhs shape a suffix of {a:?}"), b));
    }
    Ok(())
}

pub(crate) fn forward<T: Element>(op: &Op, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let a = x[0];
    let name = op.name();
    Ok(match op {
        Op::MatMul => {
            let b = x[1];
            let (d, out_shape) = matmul_dims(a.shape(), b.shape())?;
            let mut out = vec![T::zero(); d.batch * d.m * d.n];
            for t in 0..d.batch {
                let (ao, bo, co) = (
                    t * d.m * d.k,
                    if d.shared_rhs { 0 } else { t * d.k * d.n },
                    t * d.m * d.n,
                );
                T::gemm(
                    d.m,
                    d.k,
                    d.n,
                    &a.data()[ao..ao + d.m * d.k],
                    (d.k as isize, 1),
                    &b.data()[bo..bo + d.k * d.n],
                    (d.n as isize, 1),
                    &mut out[co..co + d.m * d.n],
                    false,
                );
            }
            tensor(out_shape, out)
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = x[1];
            check_suffix(name, a.shape(), b.shape())?;
            let bd = b.data();
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(bd.len()) {
                match op {
                    Op::Add => chunk.iter_mut().zip(bd).for_each(|(p, &q)| *p = *p + q),
                    Op::Sub => chunk.iter_mut().zip(bd).for_each(|(p, &q)| *p = *p - q),
                    _ => chunk.iter_mut().zip(bd).for_each(|(p, &q)| *p = *p * q),
                }
            }
            tensor(a.shape().to_vec(), data)
        }
        Op::Scale(s) => {
            let s: T = c(*s);
            tensor(a.shape().to_vec(), a.data().iter().map(|&v| v * s).collect())
        }
        Op::Concat { axis } => {
            let axis = *axis;
            check_axis(name, a.shape(), axis)?;
            let mut total = 0;
            for t in x {
                let (s, r) = (t.shape(), a.shape());
                if s.len() != r.len() || s.iter().zip(r).enumerate().any(|(i, (p, q))| i != axis && p != q) {
                    return Err(mismatch(name, format!("{r:?} except axis {axis}"), s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(a.shape(), axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in x {
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = total;
            tensor(shape, data)
        }
        Op::Slice { axis, start, len } => {
            let (axis, start, len) = (*axis, *start, *len);
            check_axis(name, a.shape(), axis)?;
            if len == 0 || start + len > a.shape()[axis] {
                return Err(mismatch(
                    name,
                    format!("range {start}..{} within axis {axis}", start + len),
                    a.shape(),
                ));
            }
            let (outer, n, inner) = split_axis(a.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            tensor(shape, data)
        }
        Op::GatherRows { indices } => {
            if a.rank() < 1 || indices.is_empty() {
                return Err(mismatch(name, "rank >= 1 table and non-empty indices", a.shape()));
            }
            let rows = a.shape()[0];
            let width = a.numel() / rows;
            let mut data = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                if i >= rows {
                    return Err(mismatch(name, format!("row index < {rows}"), i));
                }
                data.extend_from_slice(&a.data()[i * width..(i + 1) * width]);
            }
            let mut shape = a.shape().to_vec();
            shape[0] = indices.len();
            tensor(shape, data)
        }
        Op::Softmax { axis } | Op::LogSoftmax { axis } => {
            check_axis(name, a.shape(), *axis)?;
            let log = matches!(op, Op::LogSoftmax { .. });
            let out = map_lanes(a.shape(), *axis, [a.data()], |[x], out| {
                let max = x.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = (xi - max).exp_fast();
                    total = total + *o;
                }
                if log {
                    let shift = max + total.ln();
                    for (o, &xi) in out.iter_mut().zip(x) {
                        *o = xi - shift;
                    }
                } else {
                    let inv = T::one() / total;
                    out.iter_mut().for_each(|o| *o = *o * inv);
                }
            });
            tensor(a.shape().to_vec(), out)
        }
        Op::LayerNorm { axis, eps } => {
            check_axis(name, a.shape(), *axis)?;
            let eps: T = c(*eps);
            let n: T = c(a.shape()[*axis] as f64);
            let out = map_lanes(a.shape(), *axis, [a.data()], |[x], out| {
                let mean = x.iter().fold(T::zero(), |s, &v| s + v) / n;
                let var = x.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
                let inv = T::one() / (var + eps).sqrt();
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = (xi - mean) * inv;
                }
            });
            tensor(a.shape().to_vec(), out)
        }
        Op::L2Normalize { axis, eps } => {
            check_axis(name, a.shape(), *axis)?;
            let eps: T = c(*eps);
            let out = map_lanes(a.shape(), *axis, [a.data()], |[x], out| {
                let norm = x.iter().fold(T::zero(), |s, &v| s + v * v).sqrt().max(eps);
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = xi / norm;
                }
            });
            tensor(a.shape().to_vec(), out)
        }
        Op::Gelu => tensor(a.shape().to_vec(), a.data().iter().map(|&v| gelu(v)).collect()),
        Op::Log => tensor(a.shape().to_vec(), a.data().iter().map(|v| v.ln()).collect()),
        Op::Exp => tensor(a.shape().to_vec(), a.data().iter().map(|v| v.exp()).collect()),
        Op::Square => tensor(a.shape().to_vec(), a.data().iter().map(|&v| v * v).collect()),
        Op::Mean { axis } | Op::Sum { axis } => {
            check_axis(name, a.shape(), *axis)?;
            let (outer, n, inner) = split_axis(a.shape(), *axis);
            let scale: T = if matches!(op, Op::Mean { .. }) {
                c(1.0 / n as f64)
            } else {
                T::one()
            };
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let row = &a.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
            }
            if matches!(op, Op::Mean { .. }) {
                data.iter_mut().for_each(|d| *d = *d * scale);
            }
            let mut shape = a.shape().to_vec();
            shape.remove(*axis);
            tensor(shape, data)
        }
        Op::Transpose { perm } => {
            let r = a.rank();
            let mut seen = vec![false; r];
            if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
                return Err(TensorError::BadAttribute {
                    op: name,
                    reason: format!("{perm:?} is not a permutation of rank {r}"),
                });
            }
            permute(a, perm)
        }
        Op::MaskedFill { mask, value } => {
            if mask.len() != a.numel() {
                return Err(mismatch(name, format!("mask of {} entries", a.numel()), mask.len()));
            }
            let v: T = c(*value);
            let data = a
                .data()
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { v } else { x })
                .collect();
            tensor(a.shape().to_vec(), data)
        }
        Op::StopGradient => a.clone(),
        Op::Reshape { shape } => a
            .clone()
            .reshaped(shape)
            .map_err(|_| mismatch(name, format!("{} elements", a.numel()), shape))?,
    })
}

// 0.5 · (1 + tanh(u)) is evaluated as the logistic function of 2u.
#[inline(always)]
fn gelu_gate<T: Element>(x: T) -> (T, T) {
    let k: T = c((2.0 / std::f64::consts::PI).sqrt());
    let a: T = c(0.044715);
    let u = k * (x + a * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).exp_fast());
    (s, k * (T::one() + c::<T>(3.0) * a * x * x))
}

fn gelu<T: Element>(x: T) -> T {
    x * gelu_gate(x).0
}

#[inline(always)]
fn gelu_grad<T: Element>(x: T) -> T {
    let (s, du) = gelu_gate(x);
    s + (x + x) * s * (T::one() - s) * du
}

/// Elementwise vector-Jacobian product; `f(input, output, upstream)`.
fn ew<T: Element>(a: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T, T) -> T) -> Vec<Option<Tensor<T>>> {
    let data = a
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
        .collect();
    vec![Some(tensor(a.shape().to_vec(), data))]
}

/// Runs `f(input lanes, output lane)` over every 1-D lane along `axis`.
///
/// Lanes along the last axis are passed as subslices; other axes are
/// gathered into scratch buffers and scattered back.
fn map_lanes<T: Element, const N: usize>(
    shape: &[usize],
    axis: usize,
    inputs: [&[T]; N],
    mut f: impl FnMut([&[T]; N], &mut [T]),
) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); outer * n * inner];
    if inner == 1 {
        for (o, lane) in out.chunks_exact_mut(n).enumerate() {
            f(inputs.map(|x| &x[o * n..(o + 1) * n]), lane);
        }
        return out;
    }
    let mut bufs: [Vec<T>; N] = std::array::from_fn(|_| vec![T::zero(); n]);
    let mut lane = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (buf, x) in bufs.iter_mut().zip(&inputs) {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = x[base + j * inner];
                }
            }
            f(std::array::from_fn(|k| bufs[k].as_slice()), &mut lane);
            for (j, &v) in lane.iter().enumerate() {
                out[base + j * inner] = v;
            }
        }
    }
    out
}

fn permute<T: Element>(a: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let r = a.rank();
    let in_strides = strides_of(a.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = a.data();
    if r == 0 {
        return a.clone();
    }
    // Odometer over all but the last output axis; the last axis is a strided run.
    let (run, step) = (out_shape[r - 1], src_strides[r - 1]);
    let mut idx = vec![0usize; r - 1];
    let mut data = Vec::with_capacity(a.numel());
    let mut offset = 0usize;
    for _ in 0..a.numel() / run {
        if step == 1 {
            data.extend_from_slice(&src[offset..offset + run]);
        } else {
            data.extend((0..run).map(|j| src[offset + j * step]));
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    tensor(out_shape, data)
}

/// Vector-Jacobian products. Entry `i` is `None` when `needs[i]` is false.
pub(crate) fn backward<T: Element>(
    op: &Op,
    x: &[&Tensor<T>],
    y: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let a = x[0];
    let like = |data: Vec<T>, t: &Tensor<T>| tensor(t.shape().to_vec(), data);
    match op {
        Op::MatMul => {
            let b = x[1];
            let (d, _) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
            let mut ga = needs[0].then(|| vec![T::zero(); a.numel()]);
            let mut gb = needs[1].then(|| vec![T::zero(); b.numel()]);
            for t in 0..d.batch {
                let ao = t * d.m * d.k;
                let bo = if d.shared_rhs { 0 } else { t * d.k * d.n };
                let co = t * d.m * d.n;
                let gs = &g.data()[co..co + d.m * d.n];
                if let Some(ga) = ga.as_mut() {
                    // dA = dC · Bᵀ
                    T::gemm(
                        d.m,
                        d.n,
                        d.k,
                        gs,
                        (d.n as isize, 1),
                        &b.data()[bo..bo + d.k * d.n],
                        (1, d.n as isize),
                        &mut ga[ao..ao + d.m * d.k],
                        false,
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    // dB (+)= Aᵀ · dC
                    T::gemm(
                        d.k,
                        d.m,
                        d.n,
                        &a.data()[ao..ao + d.m * d.k],
                        (1, d.k as isize),
                        gs,
                        (d.n as isize, 1),
                        &mut gb[bo..bo + d.k * d.n],
                        d.shared_rhs && t > 0,
                    );
                }
            }
            vec![ga.map(|v| like(v, a)), gb.map(|v| like(v, b))]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = x[1];
            let bn = b.numel();
            let ga = needs[0].then(|| match op {
                Op::Mul => {
                    let mut out = g.data().to_vec();
                    for ch in out.chunks_mut(bn) {
                        ch.iter_mut().zip(b.data()).for_each(|(gi, &bi)| *gi = *gi * bi);
                    }
                    out
                }
                _ => g.data().to_vec(),
            });
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); bn];
                for (ci, chunk) in g.data().chunks(bn).enumerate() {
                    let arow = &a.data()[ci * bn..(ci + 1) * bn];
                    for ((s, &gi), &ai) in acc.iter_mut().zip(chunk).zip(arow) {
                        *s = match op {
                            Op::Add => *s + gi,
                            Op::Sub => *s - gi,
                            _ => *s + gi * ai,
                        };
                    }
                }
                acc
            });
            vec![ga.map(|v| like(v, a)), gb.map(|v| like(v, b))]
        }
        Op::Scale(s) => {
            let s: T = c(*s);
            vec![Some(like(g.data().iter().map(|&v| v * s).collect(), a))]
        }
        Op::Concat { axis } => {
            let (outer, _, inner) = split_axis(y.shape(), *axis);
            let total = y.shape()[*axis];
            let mut out = Vec::with_capacity(x.len());
            let mut offset = 0;
            for (t, &need) in x.iter().zip(needs) {
                let len = t.shape()[*axis];
                if need {
                    let mut data = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    out.push(Some(like(data, t)));
                } else {
                    out.push(None);
                }
                offset += len;
            }
            out
        }
        Op::Slice { axis, start, len } => {
            let (outer, n, inner) = split_axis(a.shape(), *axis);
            let mut data = vec![T::zero(); a.numel()];
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(like(data, a))]
        }
        Op::GatherRows { indices } => {
            let width = a.numel() / a.shape()[0];
            let mut data = vec![T::zero(); a.numel()];
            for (r, &i) in indices.iter().enumerate() {
                let src = &g.data()[r * width..(r + 1) * width];
                for (d, &s) in data[i * width..(i + 1) * width].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            vec![Some(like(data, a))]
        }
        Op::Softmax { axis } => {
            let data = map_lanes(a.shape(), *axis, [y.data(), g.data()], |[y, g], out| {
                let dot = y.iter().zip(g).fold(T::zero(), |s, (&yi, &gi)| s + yi * gi);
                for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
                    *o = yi * (gi - dot);
                }
            });
            vec![Some(like(data, a))]
        }
        Op::LogSoftmax { axis } => {
            let data = map_lanes(a.shape(), *axis, [y.data(), g.data()], |[y, g], out| {
                let total = g.iter().fold(T::zero(), |s, &gi| s + gi);
                for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
                    *o = gi - yi.exp_fast() * total;
                }
            });
            vec![Some(like(data, a))]
        }
        Op::LayerNorm { axis, eps } => {
            let eps: T = c(*eps);
            let n: T = c(a.shape()[*axis] as f64);
            let data = map_lanes(a.shape(), *axis, [a.data(), y.data(), g.data()], |[x, y, g], out| {
                let mean = x.iter().fold(T::zero(), |s, &v| s + v) / n;
                let var = x.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
                let inv = T::one() / (var + eps).sqrt();
                let g_mean = g.iter().fold(T::zero(), |s, &gi| s + gi) / n;
                let gy_mean = y.iter().zip(g).fold(T::zero(), |s, (&yi, &gi)| s + yi * gi) / n;
                for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
                    *o = inv * (gi - g_mean - yi * gy_mean);
                }
            });
            vec![Some(like(data, a))]
        }
        Op::L2Normalize { axis, eps } => {
            let eps: T = c(*eps);
            let data = map_lanes(a.shape(), *axis, [a.data(), y.data(), g.data()], |[x, y, g], out| {
                let raw = x.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
                if raw > eps {
                    let dot = y.iter().zip(g).fold(T::zero(), |s, (&yi, &gi)| s + yi * gi);
                    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
                        *o = (gi - yi * dot) / raw;
                    }
                } else {
                    for (o, &gi) in out.iter_mut().zip(g) {
                        *o = gi / eps;
                    }
                }
            });
            vec![Some(like(data, a))]
        }
        Op::Gelu => ew(a, y, g, |xi, _, gi| gi * gelu_grad(xi)),
        Op::Log => ew(a, y, g, |xi, _, gi| gi / xi),
        Op::Exp => ew(a, y, g, |_, yi, gi| gi * yi),
        Op::Square => ew(a, y, g, |xi, _, gi| gi * xi * (T::one() + T::one())),
        Op::Mean { axis } | Op::Sum { axis } => {
            let (outer, n, inner) = split_axis(a.shape(), *axis);
            let scale: T = if matches!(op, Op::Mean { .. }) {
                c(1.0 / n as f64)
            } else {
                T::one()
            };
            let mut data = Vec::with_capacity(a.numel());
            for o in 0..outer {
                let row = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..n {
                    data.extend(row.iter().map(|&v| v * scale));
                }
            }
            vec![Some(like(data, a))]
        }
        Op::Transpose { perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![Some(permute(g, &inverse))]
        }
        Op::MaskedFill { mask, .. } => {
            let data = g
                .data()
                .iter()
                .zip(mask)
                .map(|(&gi, &m)| if m { T::zero() } else { gi })
                .collect();
            vec![Some(like(data, a))]
        }
        Op::StopGradient => vec![None],
        Op::Reshape { .. } => vec![Some(like(g.data().to_vec(), a))],
    }
}
