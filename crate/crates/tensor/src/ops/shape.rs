//! Concatenation, slicing, axis permutation and row gathers.

use crate::elem::Elem;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{numel, Tensor};

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Elem>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    const OP: &str = "concat";
    let first = match parts.first() {
        Some(f) => f,
        None => return invalid(OP, "nothing to concatenate"),
    };
    if axis >= first.rank() {
        return invalid(OP, format!("axis {axis} out of range for rank {}", first.rank()));
    }
    for p in parts {
        if p.rank() != first.rank()
            || p.shape().iter().zip(first.shape()).enumerate().any(|(d, (a, b))| d != axis && a != b)
        {
            return shape_err(OP, format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()));
        }
    }
    let (outer, inner) = outer_inner(first.shape(), axis);
    let extents: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
    let total: usize = extents.iter().sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for (p, &e) in parts.iter().zip(&extents) {
            let run = e * inner;
            out.extend_from_slice(&p.data()[o * run..(o + 1) * run]);
        }
    }
    let flags: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
    Ok(Tensor::from_op(shape, out, parts, move |g| {
        let mut grads: Vec<Option<Vec<T>>> = flags
            .iter()
            .zip(&extents)
            .map(|(&f, &e)| f.then(|| Vec::with_capacity(outer * e * inner)))
            .collect();
        let mut off = 0;
        for _ in 0..outer {
            for (gp, &e) in grads.iter_mut().zip(&extents) {
                let run = e * inner;
                if let Some(gp) = gp {
                    gp.extend_from_slice(&g[off..off + run]);
                }
                off += run;
            }
        }
        grads
    }))
}

impl<T: Elem> Tensor<T> {
    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start >= end || end > self.dim(axis) {
            return invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", self.shape()),
            );
        }
        let (outer, inner) = outer_inner(self.shape(), axis);
        let full = self.dim(axis) * inner;
        let run = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * run);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&self.data()[base..base + run]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        let len = self.numel();
        Ok(Tensor::from_op(shape, out, &[self], move |g| {
            let mut gx = vec![T::zero(); len];
            for o in 0..outer {
                let base = o * full + start * inner;
                gx[base..base + run].copy_from_slice(&g[o * run..(o + 1) * run]);
            }
            vec![Some(gx)]
        }))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return invalid("permute", format!("{perm:?} is not a permutation of rank {r}"));
        }
        let in_shape = self.shape().to_vec();
        let mut in_strides = vec![1; r];
        for d in (0..r.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        // offsets[i] = input offset of output element i
        let n = self.numel();
        let mut offsets = Vec::with_capacity(n);
        let mut counter = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..n {
            offsets.push(off);
            for d in (0..r).rev() {
                counter[d] += 1;
                off += src_strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                off -= src_strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        let x = self.data();
        let out = offsets.iter().map(|&o| x[o]).collect();
        Ok(Tensor::from_op(out_shape, out, &[self], move |g| {
            let mut gx = vec![T::zero(); n];
            for (i, &o) in offsets.iter().enumerate() {
                gx[o] = g[i];
            }
            vec![Some(gx)]
        }))
    }
}

/// Gather rows of a `[rows, dim]` table: output `[ids.len(), dim]`.
pub fn embedding<T: Elem>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (rows, dim) = match table.shape() {
        [r, d] => (*r, *d),
        s => return shape_err("embedding", format!("table must be 2-D, got {s:?}")),
    };
    if ids.is_empty() {
        return invalid("embedding", "no ids");
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
        return invalid("embedding", format!("id {bad} out of range for {rows} rows"));
    }
    let t = table.data();
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &i in ids {
        out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
    }
    let ids = ids.to_vec();
    Ok(Tensor::from_op(vec![ids.len(), dim], out, &[table], move |g| {
        let mut gt = vec![T::zero(); rows * dim];
        for (r, &i) in ids.iter().enumerate() {
            for (d, &v) in gt[i * dim..(i + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                *d += v;
            }
        }
        vec![Some(gt)]
    }))
}

/// Single-head scaled dot-product attention.
/// `q: [B, Lq, d]`, `k: [B, Lk, d]`, `v: [B, Lk, dv]` → `[B, Lq, dv]`.
pub fn attention<T: Elem>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return shape_err("attention", "q, k, v must be [B, L, d]");
    }
    let d = q.dim(2);
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let scores = q.matmul_t(k, false, true)?.scale(scale);
    scores.softmax().matmul(v)
}
