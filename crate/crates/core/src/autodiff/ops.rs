use std::sync::Arc;

use super::kernels::{self, gelu_grad, sigmoid};
use super::{ParamKey, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Param(ParamKey),
    Matmul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Unary { x: Var, f: Unary },
    Softmax { x: Var, axis: usize, mask: Option<Arc<[bool]>> },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    Gather { table: Var, ids: Arc<[usize]>, lead: Vec<usize> },
    SelectRows { x: Var, rows: Arc<[usize]> },
    ScatterRows { x: Var, rows: Arc<[usize]>, n: usize },
    SliceLast { x: Var, start: usize, len: usize },
    ConcatLast { xs: Vec<Var> },
    ConcatAxis1 { a: Var, b: Var },
    Reshape { x: Var, shape: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    SumLast { x: Var },
    Bce { pred: Var, labels: Arc<[T]>, eps: T },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Matmul { a, b } | Op::Bmm { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::ConcatAxis1 { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatLast { xs } => xs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::Bce { pred, .. } => vec![*pred],
            Op::Scale { x, .. }
            | Op::Unary { x, .. }
            | Op::Softmax { x, .. }
            | Op::SelectRows { x, .. }
            | Op::ScatterRows { x, .. }
            | Op::SliceLast { x, .. }
            | Op::Reshape { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SumLast { x } => vec![*x],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Matmul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Unary { .. } => "unary",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::SelectRows { .. } => "select_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::SliceLast { .. } => "slice_last",
            Op::ConcatLast { .. } => "concat_last",
            Op::ConcatAxis1 { .. } => "concat_axis1",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumLast { .. } => "sum_last",
            Op::Bce { .. } => "bce",
        }
    }
}

/// How a second operand combines with the first in elementwise ops.
enum Broadcast {
    Same,
    Row(usize),
}

fn broadcast_kind<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.rank() == 1 && b.numel() == a.last_dim() {
        Ok(Broadcast::Row(b.numel()))
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

fn bmm_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<(usize, usize, usize, usize)> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(Error::dim("bmm", a.shape(), b.shape()));
    }
    let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bk, n) = if trans_b {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    if bk != k {
        return Err(Error::dim("bmm", a.shape(), b.shape()));
    }
    Ok((batch, m, k, n))
}

/// `(outer, len, inner)` strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn forward<'a, T: Scalar>(
    op: &Op<T>,
    val: impl Fn(Var) -> &'a Tensor<T>,
) -> Result<Tensor<T>> {
    match op {
        Op::Leaf | Op::Param(_) => unreachable!("leaves carry their own values"),
        Op::Matmul { a, b } => {
            let (a, b) = (val(*a), val(*b));
            if b.rank() != 2 || a.last_dim() != b.shape()[0] {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.last_dim(), b.shape()[1]);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Ok(Tensor::from_parts(shape, kernels::matmul(a.data(), b.data(), m, k, n)))
        }
        Op::Bmm { a, b, trans_b } => {
            let (a, b) = (val(*a), val(*b));
            let (batch, m, k, n) = bmm_dims(a, b, *trans_b)?;
            let mut out = Vec::with_capacity(batch * m * n);
            for s in 0..batch {
                let ab = &a.data()[s * m * k..(s + 1) * m * k];
                let bb = &b.data()[s * k * n..(s + 1) * k * n];
                if *trans_b {
                    out.extend(kernels::matmul_bt(ab, bb, m, k, n));
                } else {
                    out.extend(kernels::matmul(ab, bb, m, k, n));
                }
            }
            Ok(Tensor::from_parts(vec![batch, m, n], out))
        }
        Op::Add { a, b } | Op::Mul { a, b } => {
            let is_add = matches!(op, Op::Add { .. });
            let (a, b) = (val(*a), val(*b));
            let kind = broadcast_kind(op.name(), a, b)?;
            let f = |x: T, y: T| if is_add { x + y } else { x * y };
            let data: Vec<T> = match kind {
                Broadcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
                Broadcast::Row(n) => a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data()[i % n]))
                    .collect(),
            };
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::Scale { x, c } => {
            let x = val(*x);
            Ok(Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v * *c).collect(),
            ))
        }
        Op::Unary { x, f } => {
            let x = val(*x);
            let data = x
                .data()
                .iter()
                .map(|&v| match f {
                    Unary::Tanh => v.tanh(),
                    Unary::Sigmoid => sigmoid(v),
                    Unary::Relu => v.max(T::zero()),
                    Unary::Gelu => kernels::gelu(v),
                })
                .collect();
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        }
        Op::Softmax { x, axis, mask } => {
            let x = val(*x);
            if *axis >= x.rank() {
                return Err(Error::Validation(format!(
                    "softmax axis {axis} out of range for shape {:?}",
                    x.shape()
                )));
            }
            if let Some(m) = mask {
                if m.len() != x.numel() {
                    return Err(Error::dim("softmax mask", x.shape(), &[m.len()]));
                }
            }
            let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut out = vec![T::zero(); x.numel()];
            let xd = x.data();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| o * len * inner + a * inner + i;
                    let mut max = T::neg_infinity();
                    let mut any = false;
                    for a in 0..len {
                        if keep(idx(a)) {
                            any = true;
                            max = max.max(xd[idx(a)]);
                        }
                    }
                    if !any {
                        return Err(Error::Validation(
                            "softmax over a slice with every position masked".into(),
                        ));
                    }
                    let mut total = T::zero();
                    for a in 0..len {
                        if keep(idx(a)) {
                            let e = (xd[idx(a)] - max).exp();
                            out[idx(a)] = e;
                            total += e;
                        }
                    }
                    for a in 0..len {
                        out[idx(a)] /= total;
                    }
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let (x, gain, bias) = (val(*x), val(*gain), val(*bias));
            let n = x.last_dim();
            if gain.shape() != [n] || bias.shape() != [n] {
                return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
            }
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(n) {
                let (mean, rstd) = row_stats(row, *eps);
                for (j, &v) in row.iter().enumerate() {
                    out.push((v - mean) * rstd * gain.data()[j] + bias.data()[j]);
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Op::Gather { table, ids, lead } => {
            let table = val(*table);
            if table.rank() != 2 {
                return Err(Error::dim("gather", table.shape(), &[ids.len()]));
            }
            if lead.iter().product::<usize>() != ids.len() {
                return Err(Error::dim("gather", lead, &[ids.len()]));
            }
            let (rows, d) = (table.shape()[0], table.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids.iter() {
                if id >= rows {
                    return Err(Error::Index(format!("id {id} out of range for table of {rows} rows")));
                }
                out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
            }
            let mut shape = lead.clone();
            shape.push(d);
            Tensor::new(shape, out)
        }
        Op::SelectRows { x, rows } => {
            let x = val(*x);
            let n = x.shape()[0];
            let stride = x.numel() / n;
            let mut out = Vec::with_capacity(rows.len() * stride);
            for &r in rows.iter() {
                if r >= n {
                    return Err(Error::Index(format!("row {r} out of range for {n} rows")));
                }
                out.extend_from_slice(&x.data()[r * stride..(r + 1) * stride]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, out)
        }
        Op::ScatterRows { x, rows, n } => {
            let x = val(*x);
            if x.shape()[0] != rows.len() {
                return Err(Error::dim("scatter_rows", x.shape(), &[rows.len()]));
            }
            let stride = x.numel() / rows.len();
            let mut out = vec![T::zero(); n * stride];
            for (i, &r) in rows.iter().enumerate() {
                if r >= *n {
                    return Err(Error::Index(format!("row {r} out of range for {n} rows")));
                }
                out[r * stride..(r + 1) * stride].copy_from_slice(&x.data()[i * stride..(i + 1) * stride]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = *n;
            Ok(Tensor::from_parts(shape, out))
        }
        Op::SliceLast { x, start, len } => {
            let x = val(*x);
            let d = x.last_dim();
            if start + len > d || *len == 0 {
                return Err(Error::dim("slice_last", x.shape(), &[*start, *len]));
            }
            let mut out = Vec::with_capacity(x.rows() * len);
            for row in x.data().chunks(d) {
                out.extend_from_slice(&row[*start..start + len]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = *len;
            Ok(Tensor::from_parts(shape, out))
        }
        Op::ConcatLast { xs } => {
            let parts: Vec<&Tensor<T>> = xs.iter().map(|v| val(*v)).collect();
            let first = parts.first().ok_or_else(|| Error::Validation("concat of nothing".into()))?;
            let lead = &first.shape()[..first.rank() - 1];
            for p in &parts {
                if &p.shape()[..p.rank() - 1] != lead {
                    return Err(Error::dim("concat_last", first.shape(), p.shape()));
                }
            }
            let total: usize = parts.iter().map(|p| p.last_dim()).sum();
            let rows = first.rows();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in &parts {
                    let d = p.last_dim();
                    out.extend_from_slice(&p.data()[r * d..(r + 1) * d]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Ok(Tensor::from_parts(shape, out))
        }
        Op::ConcatAxis1 { a, b } => {
            let (a, b) = (val(*a), val(*b));
            if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[2] {
                return Err(Error::dim("concat_axis1", a.shape(), b.shape()));
            }
            let (batch, s1, s2, d) = (a.shape()[0], a.shape()[1], b.shape()[1], a.shape()[2]);
            let mut out = Vec::with_capacity(batch * (s1 + s2) * d);
            for i in 0..batch {
                out.extend_from_slice(&a.data()[i * s1 * d..(i + 1) * s1 * d]);
                out.extend_from_slice(&b.data()[i * s2 * d..(i + 1) * s2 * d]);
            }
            Ok(Tensor::from_parts(vec![batch, s1 + s2, d], out))
        }
        Op::Reshape { x, shape } => val(*x).clone().reshaped(shape.clone()),
        Op::Sum { x } => Ok(Tensor::scalar(val(*x).data().iter().copied().sum())),
        Op::Mean { x } => {
            let x = val(*x);
            let total: T = x.data().iter().copied().sum();
            Ok(Tensor::scalar(total / T::of(x.numel() as f64)))
        }
        Op::SumLast { x } => {
            let x = val(*x);
            let d = x.last_dim();
            let data: Vec<T> = x.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
            let shape = if x.rank() == 1 {
                vec![1]
            } else {
                x.shape()[..x.rank() - 1].to_vec()
            };
            Ok(Tensor::from_parts(shape, data))
        }
        Op::Bce { pred, labels, eps } => {
            let p = val(*pred);
            if labels.len() != p.numel() {
                return Err(Error::dim("bce", p.shape(), &[labels.len()]));
            }
            let hi = T::one() - *eps;
            let data = p
                .data()
                .iter()
                .zip(labels.iter())
                .map(|(&q, &y)| {
                    let q = q.max(*eps).min(hi);
                    -(y * q.ln() + (T::one() - y) * (T::one() - q).ln())
                })
                .collect();
            Ok(Tensor::from_parts(p.shape().to_vec(), data))
        }
    }
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// Local gradient rules. Returns one contribution per input that requires a
/// gradient.
pub(crate) fn backward<'a, T: Scalar>(
    op: &Op<T>,
    val: impl Fn(Var) -> &'a Tensor<T>,
    needs: impl Fn(Var) -> bool,
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let mut res = Vec::new();
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::Matmul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
            if needs(*a) {
                let da = kernels::matmul_bt(g.data(), bv.data(), m, n, k);
                res.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
            }
            if needs(*b) {
                let mut db = vec![T::zero(); k * n];
                kernels::matmul_at_acc(av.data(), g.data(), m, k, n, &mut db);
                res.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, k, n) = bmm_dims(av, bv, *trans_b)?;
            if needs(*a) {
                let mut da = Vec::with_capacity(batch * m * k);
                for s in 0..batch {
                    let gb = &g.data()[s * m * n..(s + 1) * m * n];
                    let bb = &bv.data()[s * k * n..(s + 1) * k * n];
                    if *trans_b {
                        // C = A·Bᵀ with B[n×k]: dA = dC·B
                        da.extend(kernels::matmul(gb, bb, m, n, k));
                    } else {
                        // C = A·B with B[k×n]: dA = dC·Bᵀ
                        da.extend(kernels::matmul_bt(gb, bb, m, n, k));
                    }
                }
                res.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
            }
            if needs(*b) {
                let mut db = vec![T::zero(); batch * k * n];
                for s in 0..batch {
                    let ab = &av.data()[s * m * k..(s + 1) * m * k];
                    let gb = &g.data()[s * m * n..(s + 1) * m * n];
                    let dst = &mut db[s * k * n..(s + 1) * k * n];
                    if *trans_b {
                        // dB[n×k] = dCᵀ·A
                        kernels::matmul_at_acc(gb, ab, m, n, k, dst);
                    } else {
                        // dB[k×n] = Aᵀ·dC
                        kernels::matmul_at_acc(ab, gb, m, k, n, dst);
                    }
                }
                res.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
            }
        }
        Op::Add { a, b } | Op::Mul { a, b } => {
            let is_add = matches!(op, Op::Add { .. });
            let (av, bv) = (val(*a), val(*b));
            let kind = broadcast_kind(op.name(), av, bv)?;
            if needs(*a) {
                let da: Vec<T> = if is_add {
                    g.data().to_vec()
                } else {
                    match kind {
                        Broadcast::Same => g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
                        Broadcast::Row(n) => g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| x * bv.data()[i % n])
                            .collect(),
                    }
                };
                res.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
            }
            if needs(*b) {
                let term = |i: usize| if is_add { g.data()[i] } else { g.data()[i] * av.data()[i] };
                let db: Vec<T> = match kind {
                    Broadcast::Same => (0..g.numel()).map(term).collect(),
                    Broadcast::Row(n) => {
                        let mut acc = vec![T::zero(); n];
                        for i in 0..g.numel() {
                            acc[i % n] += term(i);
                        }
                        acc
                    }
                };
                res.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
            }
        }
        Op::Scale { x, c } => {
            if needs(*x) {
                let d = g.data().iter().map(|&v| v * *c).collect();
                res.push((*x, Tensor::from_parts(g.shape().to_vec(), d)));
            }
        }
        Op::Unary { x, f } => {
            if needs(*x) {
                let xv = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(out.data())
                    .map(|((&gi, &xi), &yi)| {
                        gi * match f {
                            Unary::Tanh => T::one() - yi * yi,
                            Unary::Sigmoid => yi * (T::one() - yi),
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Gelu => gelu_grad(xi),
                        }
                    })
                    .collect();
                res.push((*x, Tensor::from_parts(xv.shape().to_vec(), d)));
            }
        }
        Op::Softmax { x, axis, .. } => {
            if needs(*x) {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut dx = vec![T::zero(); out.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| o * len * inner + a * inner + i;
                        let mut dot = T::zero();
                        for a in 0..len {
                            dot += gd[idx(a)] * y[idx(a)];
                        }
                        for a in 0..len {
                            dx[idx(a)] = y[idx(a)] * (gd[idx(a)] - dot);
                        }
                    }
                }
                res.push((*x, Tensor::from_parts(out.shape().to_vec(), dx)));
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let (xv, gv) = (val(*x), val(*gain));
            let n = xv.last_dim();
            let nt = T::of(n as f64);
            let mut dx = vec![T::zero(); xv.numel()];
            let mut dgain = vec![T::zero(); n];
            let mut dbias = vec![T::zero(); n];
            for (r, row) in xv.data().chunks(n).enumerate() {
                let (mean, rstd) = row_stats(row, *eps);
                let grow = &g.data()[r * n..(r + 1) * n];
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..n {
                    let xhat = (row[j] - mean) * rstd;
                    let dxhat = grow[j] * gv.data()[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgain[j] += grow[j] * xhat;
                    dbias[j] += grow[j];
                }
                for j in 0..n {
                    let xhat = (row[j] - mean) * rstd;
                    let dxhat = grow[j] * gv.data()[j];
                    dx[r * n + j] = rstd * (dxhat - sum_dxhat / nt - xhat * sum_dxhat_xhat / nt);
                }
            }
            if needs(*x) {
                res.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
            if needs(*gain) {
                res.push((*gain, Tensor::from_parts(vec![n], dgain)));
            }
            if needs(*bias) {
                res.push((*bias, Tensor::from_parts(vec![n], dbias)));
            }
        }
        Op::Gather { table, ids, .. } => {
            if needs(*table) {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut dt = vec![T::zero(); tv.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    kernels::add_into(&mut dt[id * d..(id + 1) * d], &g.data()[i * d..(i + 1) * d]);
                }
                res.push((*table, Tensor::from_parts(tv.shape().to_vec(), dt)));
            }
        }
        Op::SelectRows { x, rows } => {
            if needs(*x) {
                let xv = val(*x);
                let stride = xv.numel() / xv.shape()[0];
                let mut dx = vec![T::zero(); xv.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    kernels::add_into(
                        &mut dx[r * stride..(r + 1) * stride],
                        &g.data()[i * stride..(i + 1) * stride],
                    );
                }
                res.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
        }
        Op::ScatterRows { x, rows, .. } => {
            if needs(*x) {
                let xv = val(*x);
                let stride = xv.numel() / rows.len();
                let mut dx = Vec::with_capacity(xv.numel());
                for &r in rows.iter() {
                    dx.extend_from_slice(&g.data()[r * stride..(r + 1) * stride]);
                }
                res.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
        }
        Op::SliceLast { x, start, len } => {
            if needs(*x) {
                let xv = val(*x);
                let d = xv.last_dim();
                let mut dx = vec![T::zero(); xv.numel()];
                for (r, grow) in g.data().chunks(*len).enumerate() {
                    dx[r * d + start..r * d + start + len].copy_from_slice(grow);
                }
                res.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
        }
        Op::ConcatLast { xs } => {
            let total = g.last_dim();
            let mut offset = 0;
            for v in xs {
                let xv = val(*v);
                let d = xv.last_dim();
                if needs(*v) {
                    let mut dx = Vec::with_capacity(xv.numel());
                    for grow in g.data().chunks(total) {
                        dx.extend_from_slice(&grow[offset..offset + d]);
                    }
                    res.push((*v, Tensor::from_parts(xv.shape().to_vec(), dx)));
                }
                offset += d;
            }
        }
        Op::ConcatAxis1 { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, s1, s2, d) = (av.shape()[0], av.shape()[1], bv.shape()[1], av.shape()[2]);
            let block = (s1 + s2) * d;
            if needs(*a) {
                let mut da = Vec::with_capacity(av.numel());
                for i in 0..batch {
                    da.extend_from_slice(&g.data()[i * block..i * block + s1 * d]);
                }
                res.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
            }
            if needs(*b) {
                let mut db = Vec::with_capacity(bv.numel());
                for i in 0..batch {
                    db.extend_from_slice(&g.data()[i * block + s1 * d..(i + 1) * block]);
                }
                res.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
            }
        }
        Op::Reshape { x, .. } => {
            if needs(*x) {
                let xv = val(*x);
                res.push((*x, Tensor::from_parts(xv.shape().to_vec(), g.data().to_vec())));
            }
        }
        Op::Sum { x } | Op::Mean { x } => {
            if needs(*x) {
                let xv = val(*x);
                let mut s = g.item();
                if matches!(op, Op::Mean { .. }) {
                    s /= T::of(xv.numel() as f64);
                }
                res.push((*x, Tensor::full(xv.shape(), s)));
            }
        }
        Op::SumLast { x } => {
            if needs(*x) {
                let xv = val(*x);
                let d = xv.last_dim();
                let dx = (0..xv.numel()).map(|i| g.data()[i / d]).collect();
                res.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
        }
        Op::Bce { pred, labels, eps } => {
            if needs(*pred) {
                let pv = val(*pred);
                let hi = T::one() - *eps;
                let d = pv
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .zip(g.data())
                    .map(|((&q, &y), &gi)| {
                        if q < *eps || q > hi {
                            T::zero()
                        } else {
                            gi * ((T::one() - y) / (T::one() - q) - y / q)
                        }
                    })
                    .collect();
                res.push((*pred, Tensor::from_parts(pv.shape().to_vec(), d)));
            }
        }
    }
    Ok(res)
}
