//! Forward numerics shared by tape ops and their backward rules.

use super::{Real, Tensor};
use crate::error::{contract, shape_err, Result};

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to a broadcast `out` shape; broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

pub fn broadcast_binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_raw(a.shape.clone(), data));
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| shape_err(op, &a.shape, &b.shape))?;
    if b.numel() == 1 {
        let y = b.data[0];
        let data = a.data.iter().map(|&x| f(x, y)).collect();
        return Ok(Tensor::from_raw(out, data));
    }
    if a.numel() == 1 {
        let x = a.data[0];
        let data = b.data.iter().map(|&y| f(x, y)).collect();
        return Ok(Tensor::from_raw(out, data));
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let n: usize = out.iter().product();
    let last = out.len() - 1;
    let inner = out[last];
    let (la, lb) = (sa[last], sb[last]);
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let rows = n / inner;
    for _ in 0..rows {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..last {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        for j in 0..inner {
            data.push(f(a.data[oa + j * la], b.data[ob + j * lb]));
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_raw(out, data))
}

/// Sums `g` down to `shape` along broadcast axes (the adjoint of broadcasting).
pub fn sum_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape == shape {
        return g.clone();
    }
    // Row broadcast, e.g. a `[c]` bias under an `[n, c]` gradient.
    let trailing: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    let k = trailing.len();
    if k > 0 && k <= g.shape.len() && g.shape[g.shape.len() - k..] == trailing[..] {
        let width: usize = trailing.iter().product();
        let mut acc = vec![T::zero(); width];
        for row in g.data.chunks(width) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        return Tensor::from_raw(shape.to_vec(), acc);
    }
    let out_shape = g.shape.clone();
    let strides = broadcast_strides(shape, &out_shape);
    let mut acc = vec![T::zero(); shape.iter().product()];
    let mut idx = vec![0usize; out_shape.len()];
    for &v in &g.data {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        acc[off] += v;
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_raw(shape.to_vec(), acc)
}

/// Sums over rows of an `[n, c]` buffer, one entry per channel.
fn column_sums<T: Real>(data: &[T], c: usize, f: impl Fn(usize, T) -> T) -> Vec<T> {
    let mut acc = vec![T::zero(); c];
    for row in data.chunks(c) {
        for (j, (a, &v)) in acc.iter_mut().zip(row).enumerate() {
            *a += f(j, v);
        }
    }
    acc
}

/// Per-channel sums folded into `groups` contiguous channel blocks.
fn fold_groups<T: Real>(per_channel: &[T], groups: usize) -> Vec<T> {
    per_channel
        .chunks(per_channel.len() / groups)
        .map(|b| b.iter().fold(T::zero(), |a, &v| a + v))
        .collect()
}

fn expand_groups<T: Real>(per_group: &[T], c: usize) -> Vec<T> {
    let width = c / per_group.len();
    per_group.iter().flat_map(|&v| std::iter::repeat_n(v, width)).collect()
}

/// Forward standardization; see `Var::normalize`. Returns the output and the
/// inverse standard deviation of each statistics group.
pub fn normalize<T: Real>(x: &Tensor<T>, groups: usize, per_row: bool, eps: T) -> (Tensor<T>, Vec<T>) {
    let (n, c) = (x.shape[0], x.shape[1]);
    let mut data = Vec::with_capacity(x.numel());
    if per_row {
        let count = T::of(c as f64);
        let mut inv_std = Vec::with_capacity(n);
        for row in x.data.chunks(c) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / count;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / count;
            let is = T::one() / (var + eps).sqrt();
            data.extend(row.iter().map(|&v| (v - mean) * is));
            inv_std.push(is);
        }
        return (Tensor::from_raw(x.shape.clone(), data), inv_std);
    }
    let count = T::of((n * c / groups) as f64);
    let mean: Vec<T> = fold_groups(&column_sums(&x.data, c, |_, v| v), groups)
        .into_iter()
        .map(|s| s / count)
        .collect();
    let mean_c = expand_groups(&mean, c);
    let var = fold_groups(&column_sums(&x.data, c, |j, v| (v - mean_c[j]) * (v - mean_c[j])), groups);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / count + eps).sqrt()).collect();
    let is_c = expand_groups(&inv_std, c);
    for row in x.data.chunks(c) {
        data.extend(row.iter().zip(&mean_c).zip(&is_c).map(|((&v, &m), &is)| (v - m) * is));
    }
    (Tensor::from_raw(x.shape.clone(), data), inv_std)
}

/// `dx = σ⁻¹ (g − mean(g) − x̂ · mean(g x̂))` within each statistics group.
pub fn normalize_backward<T: Real>(g: &Tensor<T>, xhat: &Tensor<T>, groups: usize, per_row: bool, inv_std: &[T]) -> Tensor<T> {
    let c = xhat.shape[1];
    let mut data = Vec::with_capacity(g.numel());
    if per_row {
        let count = T::of(c as f64);
        for ((gr, xr), &is) in g.data.chunks(c).zip(xhat.data.chunks(c)).zip(inv_std) {
            let mg = gr.iter().fold(T::zero(), |a, &v| a + v) / count;
            let mgx = gr.iter().zip(xr).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv) / count;
            data.extend(gr.iter().zip(xr).map(|(&gv, &xv)| is * (gv - mg - xv * mgx)));
        }
        return Tensor::from_raw(xhat.shape.clone(), data);
    }
    let count = T::of((xhat.numel() / groups) as f64);
    let mut sg = vec![T::zero(); c];
    let mut sgx = vec![T::zero(); c];
    for (gr, xr) in g.data.chunks(c).zip(xhat.data.chunks(c)) {
        for (((a, b), &gv), &xv) in sg.iter_mut().zip(sgx.iter_mut()).zip(gr).zip(xr) {
            *a += gv;
            *b += gv * xv;
        }
    }
    let per = |s: &[T]| -> Vec<T> { expand_groups(&fold_groups(s, groups).into_iter().map(|v| v / count).collect::<Vec<_>>(), c) };
    let (mg, mgx, is_c) = (per(&sg), per(&sgx), expand_groups(inv_std, c));
    for (gr, xr) in g.data.chunks(c).zip(xhat.data.chunks(c)) {
        data.extend(
            gr.iter()
                .zip(xr)
                .enumerate()
                .map(|(j, (&gv, &xv))| is_c[j] * (gv - mg[j] - xv * mgx[j])),
        );
    }
    Tensor::from_raw(xhat.shape.clone(), data)
}

/// `out += op(a) · op(b)` where `op` optionally transposes. Logical shapes are
/// `[m×k]` and `[k×p]`; storage of a transposed operand is its untransposed form.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    p: usize,
    trans_a: bool,
    trans_b: bool,
) {
    let sa = if trans_a { (1, m) } else { (k, 1) };
    let sb = if trans_b { (1, k) } else { (p, 1) };
    T::gemm(m, k, p, a, sa, b, sb, out);
}

/// Matrix product. Supports `[M,K]·[K,P]`, batched `[B,M,K]·[B,K,P]` and
/// `[B,M,K]·[K,P]` (the right operand shared across the batch).
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_t(a, b, false, false)
}

/// Matrix product with optional transposition of the last two axes of either
/// operand.
pub fn matmul_t<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let dims = |t: &Tensor<T>, tr: bool| -> Option<(usize, usize, usize)> {
        let (batch, r, c) = match t.shape.as_slice() {
            [r, c] => (0, *r, *c),
            [bb, r, c] => (*bb, *r, *c),
            _ => return None,
        };
        Some(if tr { (batch, c, r) } else { (batch, r, c) })
    };
    let err = || shape_err("matmul", &a.shape, &b.shape);
    let (ba, m, k) = dims(a, trans_a).ok_or_else(err)?;
    let (bb, k2, p) = dims(b, trans_b).ok_or_else(err)?;
    if k != k2 || (bb != 0 && ba != bb) || (ba == 0 && bb != 0) {
        return Err(err());
    }
    let batches = ba.max(1);
    let mut out = vec![T::zero(); batches * m * p];
    for bi in 0..batches {
        let a_off = bi * m * k;
        let b_off = if bb == 0 { 0 } else { bi * k * p };
        gemm_acc(
            &a.data[a_off..a_off + m * k],
            &b.data[b_off..b_off + k * p],
            &mut out[bi * m * p..(bi + 1) * m * p],
            m,
            k,
            p,
            trans_a,
            trans_b,
        );
    }
    let shape = if ba == 0 { vec![m, p] } else { vec![ba, m, p] };
    Ok(Tensor::from_raw(shape, out))
}

pub fn permute<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let rank = t.rank();
    assert_eq!(perm.len(), rank);
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * t.shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let last = rank - 1;
    let inner = out_shape[last];
    let ls = strides[last];
    let mut idx = vec![0usize; rank];
    for _ in 0..n / inner {
        let base: usize = (0..last).map(|d| idx[d] * strides[d]).sum();
        for j in 0..inner {
            data.push(t.data[base + j * ls]);
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_raw(out_shape, data)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Numerically stable softmax along `axis` (max-subtraction).
pub fn softmax<T: Real>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    scaled_softmax(t, axis, T::one())
}

/// `softmax(s · t)` along `axis`.
pub fn scaled_softmax<T: Real>(t: &Tensor<T>, axis: usize, scale: T) -> Tensor<T> {
    let (outer, len, inner) = axis_split(&t.shape, axis);
    let mut out: Vec<T> = t.data.iter().map(|&v| v * scale).collect();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(out[base + j * inner]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (out[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                s += e;
            }
            let inv = T::one() / s;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
    Tensor::from_raw(t.shape.clone(), out)
}

pub fn log_softmax<T: Real>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(&t.shape, axis);
    let mut out = t.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(out[base + j * inner]);
            }
            let mut s = T::zero();
            for j in 0..len {
                s += (out[base + j * inner] - mx).exp();
            }
            let lse = mx + s.ln();
            for j in 0..len {
                out[base + j * inner] -= lse;
            }
        }
    }
    Tensor::from_raw(t.shape.clone(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim || s.len() == 1 {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

/// Reduction along `axis`. For `Max` also returns the first argmax offset
/// (position along the axis) of every output element.
pub fn reduce<T: Real>(
    t: &Tensor<T>,
    kind: Reduce,
    axis: usize,
    keepdim: bool,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    if axis >= t.rank() {
        return Err(contract(format!("reduce axis {axis} out of range for {:?}", t.shape)));
    }
    let (outer, len, inner) = axis_split(&t.shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    let mut arg = if kind == Reduce::Max {
        Some(vec![0usize; outer * inner])
    } else {
        None
    };
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let r = o * inner + i;
            match kind {
                Reduce::Sum | Reduce::Mean => {
                    let mut s = T::zero();
                    for j in 0..len {
                        s += t.data[base + j * inner];
                    }
                    out[r] = if kind == Reduce::Mean { s / T::of(len as f64) } else { s };
                }
                Reduce::Max => {
                    let mut best = 0;
                    let mut bv = t.data[base];
                    for j in 1..len {
                        let v = t.data[base + j * inner];
                        if v > bv {
                            bv = v;
                            best = j;
                        }
                    }
                    out[r] = bv;
                    arg.as_mut().unwrap()[r] = best;
                }
            }
        }
    }
    Ok((Tensor::from_raw(reduced_shape(&t.shape, axis, keepdim), out), arg))
}

pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| contract("concat of zero tensors"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(contract(format!("concat axis {axis} out of range for rank {rank}")));
    }
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == rank
            && (0..rank).all(|d| d == axis || p.shape[d] == first.shape[d]);
        if !ok {
            return Err(shape_err("concat", &first.shape, &p.shape));
        }
        total += p.shape[axis];
    }
    let (outer, _, inner) = axis_split(&first.shape, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::from_raw(shape, data))
}

pub fn narrow<T: Real>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= t.rank() || start + len > t.shape[axis] || len == 0 {
        return Err(contract(format!(
            "narrow({axis}, {start}, {len}) out of range for {:?}",
            t.shape
        )));
    }
    let (outer, full, inner) = axis_split(&t.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&t.data[base..base + len * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = len;
    Ok(Tensor::from_raw(shape, data))
}

/// Adjoint of [`narrow`]: embeds `g` into zeros of `shape` at `start` along `axis`.
pub fn narrow_backward<T: Real>(g: &Tensor<T>, shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let (outer, full, inner) = axis_split(shape, axis);
    let len = g.shape[axis];
    let mut data = vec![T::zero(); shape.iter().product()];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        data[dst..dst + len * inner].copy_from_slice(&g.data[src..src + len * inner]);
    }
    Tensor::from_raw(shape.to_vec(), data)
}

/// Gathers slices along axis 0.
pub fn index_select<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let row = t.numel() / t.shape[0];
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        assert!(i < t.shape[0], "index {i} out of range for axis of size {}", t.shape[0]);
        data.extend_from_slice(&t.data[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape.clone();
    shape[0] = idx.len();
    Tensor::from_raw(shape, data)
}

/// Adjoint of [`index_select`]: scatter-adds rows of `g` into zeros of `shape`.
pub fn index_add<T: Real>(g: &Tensor<T>, shape: &[usize], idx: &[usize]) -> Tensor<T> {
    let row: usize = shape[1..].iter().product();
    let mut data = vec![T::zero(); shape.iter().product()];
    for (r, &i) in idx.iter().enumerate() {
        for (d, &s) in data[i * row..(i + 1) * row]
            .iter_mut()
            .zip(&g.data[r * row..(r + 1) * row])
        {
            *d += s;
        }
    }
    Tensor::from_raw(shape.to_vec(), data)
}

#[inline]
pub fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.elu_exp_m1()
    }
}

#[inline]
pub fn elu_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}
