//! Forward kernels and the broadcasting machinery shared with the backward pass.

use std::sync::Arc;

use super::{Axis, Ids, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Output shape of a broadcast plus, per input, strides aligned to the output
/// axes (0 where the input is absent or has extent 1).
#[derive(Clone, Debug)]
pub struct Broadcast {
    pub shape: Shape,
    pub strides: Vec<Vec<usize>>,
}

pub fn broadcast_shapes(shapes: &[&Shape]) -> Result<Broadcast> {
    let mut dims: Vec<(Axis, usize)> = Vec::new();
    for s in shapes {
        for &(a, e) in s.dims() {
            match dims.iter_mut().find(|d| d.0 == a) {
                Some(d) => {
                    if d.1 == 1 {
                        d.1 = e;
                    } else if e != 1 && e != d.1 {
                        return Err(Error::Shape(format!(
                            "cannot broadcast {} with extent {e} on axis {a}",
                            shapes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" and ")
                        )));
                    }
                }
                None => dims.push((a, e)),
            }
        }
    }
    dims.sort_by_key(|d| d.0);
    let shape = Shape::new(&dims)?;
    let strides = shapes
        .iter()
        .map(|s| {
            let own = s.strides();
            shape
                .dims()
                .iter()
                .map(|&(a, e)| match s.position(a) {
                    Some(p) if s.dims()[p].1 == e => own[p],
                    _ => 0,
                })
                .collect()
        })
        .collect();
    Ok(Broadcast { shape, strides })
}

/// Merges adjacent axes that both operands traverse contiguously, so inner
/// runs get as long as possible.
fn coalesce(extents: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut e, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new());
    for d in 0..extents.len() {
        if extents[d] == 1 {
            continue;
        }
        match e.len() {
            0 => {}
            n if a[n - 1] == sa[d] * extents[d] && b[n - 1] == sb[d] * extents[d] => {
                e[n - 1] *= extents[d];
                a[n - 1] = sa[d];
                b[n - 1] = sb[d];
                continue;
            }
            _ => {}
        }
        e.push(extents[d]);
        a.push(sa[d]);
        b.push(sb[d]);
    }
    (e, a, b)
}

/// Walks the output in row-major order one innermost run at a time, calling
/// `f(out_start, offset_a, offset_b, run_len, step_a, step_b)`.
pub(crate) fn zip2_rows(extents: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let (extents, sa, sb) = coalesce(extents, sa, sb);
    let rank = extents.len();
    if rank == 0 {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    let last = extents[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = extents[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for r in 0..outer {
        f(r * last, oa, ob, last, la, lb);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < extents[d] {
                break;
            }
            oa -= sa[d] * extents[d];
            ob -= sb[d] * extents[d];
            idx[d] = 0;
        }
    }
}

fn first_seq_lens<T: Copy>(inputs: &[&Tensor<T>]) -> Option<Arc<Vec<usize>>> {
    inputs
        .iter()
        .filter(|t| t.shape().has(Axis::Time))
        .find_map(|t| t.seq_lens_arc())
}

/// Elementwise binary op with broadcasting by axis name.
pub fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let mut t = Tensor::from_vec(a.shape().clone(), data)?;
        t.set_seq_lens(first_seq_lens(&[a, b]));
        return Ok(t);
    }
    let bc = broadcast_shapes(&[a.shape(), b.shape()])?;
    let mut data = vec![T::zero(); bc.shape.numel()];
    let (ad, bd) = (a.data(), b.data());
    zip2_rows(&bc.shape.extents(), &bc.strides[0], &bc.strides[1], |o, oa, ob, n, la, lb| {
        let out = &mut data[o..o + n];
        match (la, lb) {
            (1, 1) => out.iter_mut().zip(&ad[oa..oa + n]).zip(&bd[ob..ob + n]).for_each(|((z, &x), &y)| *z = f(x, y)),
            (1, 0) => {
                let y = bd[ob];
                out.iter_mut().zip(&ad[oa..oa + n]).for_each(|(z, &x)| *z = f(x, y));
            }
            (0, 1) => {
                let x = ad[oa];
                out.iter_mut().zip(&bd[ob..ob + n]).for_each(|(z, &y)| *z = f(x, y));
            }
            _ => out.iter_mut().enumerate().for_each(|(j, z)| *z = f(ad[oa + j * la], bd[ob + j * lb])),
        }
    });
    let mut t = Tensor::from_vec(bc.shape, data)?;
    t.set_seq_lens(first_seq_lens(&[a, b]));
    Ok(t)
}

/// Sums `grad` (laid out as `out`) back onto an input with broadcast strides
/// `strides`, optionally weighting each element by `other` (laid out with
/// `other_strides`). Returns a buffer of `in_len` elements.
pub(crate) fn unbroadcast<T: Scalar>(
    grad: &[T],
    out: &Shape,
    strides: &[usize],
    in_len: usize,
    other: Option<(&[T], &[usize])>,
) -> Vec<T> {
    let mut acc = vec![T::zero(); in_len];
    let ext = out.extents();
    match other {
        None => zip2_rows(&ext, strides, strides, |i, o, _, n, lo, _| {
            let g = &grad[i..i + n];
            match lo {
                0 => acc[o] = acc[o] + g.iter().copied().sum::<T>(),
                1 => acc[o..o + n].iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
                _ => g.iter().enumerate().for_each(|(j, &b)| acc[o + j * lo] = acc[o + j * lo] + b),
            }
        }),
        Some((od, os)) => zip2_rows(&ext, strides, os, |i, o, q, n, lo, lq| {
            let g = &grad[i..i + n];
            match (lo, lq) {
                (1, 1) => acc[o..o + n].iter_mut().zip(g).zip(&od[q..q + n]).for_each(|((a, &b), &c)| *a = *a + b * c),
                (1, 0) => {
                    let c = od[q];
                    acc[o..o + n].iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b * c);
                }
                (0, 1) => acc[o] = acc[o] + g.iter().zip(&od[q..q + n]).map(|(&b, &c)| b * c).sum::<T>(),
                _ => g.iter().enumerate().for_each(|(j, &b)| acc[o + j * lo] = acc[o + j * lo] + b * od[q + j * lq]),
            }
        }),
    }
    acc
}

/// `x · w` contracting the `Feature` axis of `x` with the `Input` axis of a
/// 2-D `w: [Input: K, Feature: N]`.
pub fn matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, n) = matrix_dims(w)?;
    let kx = x.shape().extent(Axis::Feature).unwrap_or(0);
    if kx != k || x.shape().dims().last().map(|d| d.0) != Some(Axis::Feature) {
        return Err(Error::Shape(format!(
            "matmul inner extents disagree: {} · {}",
            x.shape(),
            w.shape()
        )));
    }
    let m = x.len() / k;
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, x.data(), false, w.data(), false, &mut out, false);
    let mut t = Tensor::from_vec(x.shape().with_extent(Axis::Feature, n), out)?;
    t.set_seq_lens(x.seq_lens_arc());
    Ok(t)
}

pub(crate) fn matrix_dims<T: Copy>(w: &Tensor<T>) -> Result<(usize, usize)> {
    match w.shape().dims() {
        [(Axis::Input, k), (Axis::Feature, n)] => Ok((*k, *n)),
        _ => Err(Error::Shape(format!("expected an [In, F] matrix, got {}", w.shape()))),
    }
}

/// Batch index of each outer block of a `(outer, n, inner)` split, used for
/// sequence masks. `None` when the tensor carries no lengths.
fn mask_rows<T: Copy>(x: &Tensor<T>, axis: Axis) -> Option<(Vec<usize>, usize)> {
    if axis != Axis::Time {
        return None;
    }
    let lens = x.seq_lens()?;
    let (outer, _, _) = x.shape().split_at(axis)?;
    let per_batch = outer / lens.len();
    Some(((0..outer).map(|o| lens[o / per_batch]).collect(), per_batch))
}

/// Sum over `axis`, removing it. Masked `Time` positions contribute zero.
pub fn reduce_sum<T: Scalar>(x: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
    let (outer, n, inner) = x
        .shape()
        .split_at(axis)
        .ok_or_else(|| Error::Shape(format!("unknown axis {axis} in {}", x.shape())))?;
    let lens = mask_rows(x, axis).map(|m| m.0);
    let mut out = vec![T::zero(); outer * inner];
    let d = x.data();
    for o in 0..outer {
        let valid = lens.as_ref().map_or(n, |l| l[o]);
        let dst = &mut out[o * inner..(o + 1) * inner];
        for t in 0..valid {
            let src = &d[(o * n + t) * inner..(o * n + t + 1) * inner];
            dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
        }
    }
    let mut t = Tensor::from_vec(x.shape().without(axis), out)?;
    t.set_seq_lens(x.seq_lens_arc());
    Ok(t)
}

/// Row lookup: `table: [Input: V, Feature: D]`, result has the id axes plus `Feature`.
pub fn gather_rows<T: Scalar>(table: &Tensor<T>, ids: &Ids) -> Result<Tensor<T>> {
    let (v, d) = matrix_dims(table)?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids.data() {
        let id = id as usize;
        if id >= v {
            return Err(Error::Index(format!("id {id} out of range for table of {v} rows")));
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    let shape = ids.shape().with(Axis::Feature, d)?;
    let mut t = Tensor::from_vec(shape, out)?;
    t.set_seq_lens(ids.seq_lens_arc());
    Ok(t)
}

/// Softmax over `Time`, restricted to valid positions; masked positions are 0.
pub fn softmax_time<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, n, inner) = x
        .shape()
        .split_at(Axis::Time)
        .ok_or_else(|| Error::Shape(format!("softmax over Time needs a Time axis, got {}", x.shape())))?;
    let lens = mask_rows(x, Axis::Time).map(|m| m.0);
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        let valid = lens.as_ref().map_or(n, |l| l[o]);
        for i in 0..inner {
            let at = |t: usize| (o * n + t) * inner + i;
            let mut mx = T::neg_infinity();
            for t in 0..valid {
                mx = mx.max(d[at(t)]);
            }
            let mut z = T::zero();
            for t in 0..valid {
                let e = (d[at(t)] - mx).exp_();
                out[at(t)] = e;
                z = z + e;
            }
            for t in 0..valid {
                out[at(t)] = out[at(t)] / z;
            }
        }
    }
    let mut t = Tensor::from_vec(x.shape().clone(), out)?;
    t.set_seq_lens(x.seq_lens_arc());
    Ok(t)
}

/// Log-softmax over the trailing `Feature` axis.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let v = x
        .shape()
        .extent(Axis::Feature)
        .ok_or_else(|| Error::Shape(format!("log_softmax needs a Feature axis, got {}", x.shape())))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(v) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
        let lse = mx + row.iter().map(|&a| (a - mx).exp_()).sum::<T>().ln();
        row.iter_mut().for_each(|a| *a = *a - lse);
    }
    let mut t = Tensor::from_vec(x.shape().clone(), out)?;
    t.set_seq_lens(x.seq_lens_arc());
    Ok(t)
}

/// Concatenation along `Feature`; leading axes broadcast like elementwise ops.
/// Returns the result and, per part, the offset of each output row's source row.
pub fn concat_features<T: Scalar>(parts: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Vec<usize>>)> {
    if parts.is_empty() {
        return Err(Error::Shape("concat of nothing".into()));
    }
    let widths = feature_widths(parts)?;
    let leads: Vec<Shape> = parts.iter().map(|p| p.shape().without(Axis::Feature)).collect();
    let bc = broadcast_shapes(&leads.iter().collect::<Vec<_>>())?;
    let rows = bc.shape.numel();
    let total: usize = widths.iter().sum();
    let row_offsets: Vec<Vec<usize>> = (0..parts.len())
        .map(|p| {
            let mut offs = vec![0; rows];
            let s = &bc.strides[p];
            zip2_rows(&bc.shape.extents(), s, s, |i, o, _, n, lo, _| (0..n).for_each(|j| offs[i + j] = (o + j * lo) * widths[p]));
            offs
        })
        .collect();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, part) in parts.iter().enumerate() {
            let o = row_offsets[p][r];
            out.extend_from_slice(&part.data()[o..o + widths[p]]);
        }
    }
    let mut t = Tensor::from_vec(bc.shape.with(Axis::Feature, total)?, out)?;
    t.set_seq_lens(first_seq_lens(parts));
    Ok((t, row_offsets))
}

fn feature_widths<T: Copy>(parts: &[&Tensor<T>]) -> Result<Vec<usize>> {
    parts
        .iter()
        .map(|p| {
            p.shape()
                .extent(Axis::Feature)
                .ok_or_else(|| Error::Shape(format!("concat part without Feature axis: {}", p.shape())))
        })
        .collect()
}

pub fn slice_features<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let f = x.shape().extent(Axis::Feature).unwrap_or(0);
    if start + len > f || len == 0 {
        return Err(Error::Shape(format!("feature slice {start}..{} of {}", start + len, x.shape())));
    }
    let mut out = Vec::with_capacity(x.len() / f * len);
    for row in x.data().chunks(f) {
        out.extend_from_slice(&row[start..start + len]);
    }
    let mut t = Tensor::from_vec(x.shape().with_extent(Axis::Feature, len), out)?;
    t.set_seq_lens(x.seq_lens_arc());
    Ok(t)
}

/// Picks, for every batch entry `b`, the `Time` position `pos[b]` of a
/// `[Batch, Time, ...]` tensor; `None` yields zeros.
pub fn gather_time<T: Scalar>(x: &Tensor<T>, pos: &[Option<usize>]) -> Result<Tensor<T>> {
    let (b, t, inner) = batch_time_layout(x.shape())?;
    if pos.len() != b {
        return Err(Error::Shape(format!("{} positions for batch {b}", pos.len())));
    }
    let mut out = vec![T::zero(); b * inner];
    for (i, p) in pos.iter().enumerate() {
        if let Some(p) = *p {
            if p >= t {
                return Err(Error::Index(format!("time position {p} out of range {t}")));
            }
            let src = (i * t + p) * inner;
            out[i * inner..(i + 1) * inner].copy_from_slice(&x.data()[src..src + inner]);
        }
    }
    Tensor::from_vec(x.shape().without(Axis::Time), out)
}

pub(crate) fn batch_time_layout(s: &Shape) -> Result<(usize, usize, usize)> {
    match s.dims() {
        [(Axis::Batch, b), (Axis::Time, t), rest @ ..] => Ok((*b, *t, rest.iter().map(|d| d.1).product())),
        _ => Err(Error::Shape(format!("expected [B, T, ...], got {s}"))),
    }
}

/// Inverse of [`gather_time`] over many steps: `parts[k]` lands at
/// `pos[k][b]` for every batch entry; unwritten positions are zero.
pub fn scatter_time<T: Scalar>(parts: &[&Tensor<T>], pos: &[Vec<Option<usize>>], time: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Shape("scatter of nothing".into()))?;
    let shape = first.shape().with(Axis::Time, time)?;
    let (b, t, inner) = batch_time_layout(&shape)?;
    let mut out = vec![T::zero(); shape.numel()];
    for (part, ps) in parts.iter().zip(pos) {
        for (i, p) in ps.iter().enumerate() {
            if let Some(p) = *p {
                let dst = (i * t + p) * inner;
                out[dst..dst + inner].copy_from_slice(&part.data()[i * inner..(i + 1) * inner]);
            }
        }
    }
    debug_assert_eq!(b * t * inner, out.len());
    Tensor::from_vec(shape, out)
}

#[inline(always)]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    x.sigmoid_()
}

/// Fused LSTM cell nonlinearity. `z: [.., 4H]` holds gate pre-activations in
/// (input, forget, cell candidate, output) order, `c_prev: [.., H]`.
/// Returns `[.., 2H]` laid out as `[h | c]`.
pub fn lstm_cell<T: Scalar>(z: &Tensor<T>, c_prev: &Tensor<T>) -> Result<Tensor<T>> {
    let h = c_prev
        .shape()
        .extent(Axis::Feature)
        .ok_or_else(|| Error::Shape(format!("cell state without Feature axis: {}", c_prev.shape())))?;
    if z.shape().extent(Axis::Feature) != Some(4 * h) || z.len() / (4 * h) != c_prev.len() / h {
        return Err(Error::Shape(format!("lstm gates {} vs cell {}", z.shape(), c_prev.shape())));
    }
    let rows = c_prev.len() / h;
    let mut out = vec![T::zero(); rows * 2 * h];
    for r in 0..rows {
        let zr = &z.data()[r * 4 * h..(r + 1) * 4 * h];
        let cp = &c_prev.data()[r * h..(r + 1) * h];
        let o = &mut out[r * 2 * h..(r + 1) * 2 * h];
        for j in 0..h {
            let i_g = sigmoid(zr[j]);
            let f_g = sigmoid(zr[h + j]);
            let g_g = zr[2 * h + j].tanh_();
            let o_g = sigmoid(zr[3 * h + j]);
            let c = f_g * cp[j] + i_g * g_g;
            o[j] = o_g * c.tanh_();
            o[h + j] = c;
        }
    }
    Tensor::from_vec(c_prev.shape().with_extent(Axis::Feature, 2 * h), out)
}

/// Backward of [`lstm_cell`]: returns `(dz, dc_prev)`.
pub(crate) fn lstm_cell_backward<T: Scalar>(z: &[T], c_prev: &[T], g_out: &[T], h: usize) -> (Vec<T>, Vec<T>) {
    let rows = c_prev.len() / h;
    let one = T::one();
    let mut dz = vec![T::zero(); z.len()];
    let mut dc_prev = vec![T::zero(); c_prev.len()];
    for r in 0..rows {
        let zr = &z[r * 4 * h..(r + 1) * 4 * h];
        let cp = &c_prev[r * h..(r + 1) * h];
        let g = &g_out[r * 2 * h..(r + 1) * 2 * h];
        let dzr = &mut dz[r * 4 * h..(r + 1) * 4 * h];
        for j in 0..h {
            let i_g = sigmoid(zr[j]);
            let f_g = sigmoid(zr[h + j]);
            let g_g = zr[2 * h + j].tanh_();
            let o_g = sigmoid(zr[3 * h + j]);
            let c = f_g * cp[j] + i_g * g_g;
            let tc = c.tanh_();
            let dh = g[j];
            let dc = g[h + j] + dh * o_g * (one - tc * tc);
            dzr[j] = dc * g_g * i_g * (one - i_g);
            dzr[h + j] = dc * cp[j] * f_g * (one - f_g);
            dzr[2 * h + j] = dc * i_g * (one - g_g * g_g);
            dzr[3 * h + j] = dh * tc * o_g * (one - o_g);
            dc_prev[r * h + j] = dc * f_g;
        }
    }
    (dz, dc_prev)
}

/// Label-smoothed cross entropy of `log_probs: [B, Step, V]` against
/// `targets: [B, Step]`, averaged over valid positions (`lens[b]` per entry).
/// Returns `(loss, valid position count)`.
pub fn smoothed_ce<T: Scalar>(log_probs: &Tensor<T>, targets: &Ids, lens: &[usize], eps: f64) -> Result<(T, usize)> {
    let (b, s, v) = step_layout(log_probs.shape())?;
    check_targets(targets, b, s, v)?;
    let (on, off) = smoothing_weights::<T>(eps, v);
    let lp = log_probs.data();
    let mut total = T::zero();
    let mut count = 0;
    for bi in 0..b {
        for t in 0..lens[bi].min(s) {
            let row = &lp[(bi * s + t) * v..(bi * s + t + 1) * v];
            let y = targets.data()[bi * s + t] as usize;
            let mut l = T::zero();
            if off != T::zero() {
                l = row.iter().fold(T::zero(), |a, &x| a + x) * off;
            }
            l = l + row[y] * (on - off);
            total = total - l;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Shape("cross entropy over zero valid positions".into()));
    }
    Ok((total / T::from_f64(count as f64), count))
}

/// Weights `(q_true, q_other)` of the smoothed target distribution.
pub(crate) fn smoothing_weights<T: Scalar>(eps: f64, v: usize) -> (T, T) {
    let off = eps / v as f64;
    (T::from_f64(1.0 - eps + off), T::from_f64(off))
}

pub(crate) fn step_layout(s: &Shape) -> Result<(usize, usize, usize)> {
    match s.dims() {
        [(Axis::Batch, b), (Axis::Step, t), (Axis::Feature, v)] => Ok((*b, *t, *v)),
        _ => Err(Error::Shape(format!("expected [B, S, F], got {s}"))),
    }
}

pub(crate) fn check_targets(targets: &Ids, b: usize, s: usize, v: usize) -> Result<()> {
    match targets.shape().dims() {
        [(Axis::Batch, tb), (Axis::Step, ts)] if *tb == b && *ts == s => {}
        _ => {
            return Err(Error::Shape(format!(
                "targets {} do not match log-probs [B:{b}, S:{s}]",
                targets.shape()
            )))
        }
    }
    if let Some(&bad) = targets.data().iter().find(|&&y| y as usize >= v) {
        return Err(Error::Index(format!("target id {bad} out of range for vocabulary {v}")));
    }
    Ok(())
}
