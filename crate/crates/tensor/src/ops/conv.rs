//! 2-D convolution (cross-correlation), its transpose, and nearest upsampling.
//! All layouts are NCHW; kernels are `[out, in, k, k]` for convolution and
//! `[in, out, k, k]` for the transpose.

use crate::elem::{gemm, Elem, MatRef};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Valid output-column range for kernel column `kj`, and the input column
/// of the first one.
fn valid_cols(g: &Geom, kj: usize) -> (usize, usize) {
    // ix = ox·stride + kj − pad must lie in [0, w)
    let lo = if kj >= g.pad { 0 } else { (g.pad - kj).div_ceil(g.stride) };
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow) } else { 0 };
    (lo, hi.max(lo))
}

/// Columns of one image written into `cols` (row stride `ld`, first column `off`).
fn im2col<T: Elem>(src: &[T], g: &Geom, cols: &mut [T], ld: usize, off: usize) {
    for c in 0..g.c {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + g.cols()];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].iter_mut().for_each(|v| *v = T::zero());
                    drow[hi..].iter_mut().for_each(|v| *v = T::zero());
                    let ix0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                    } else {
                        for (i, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = srow[ix0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of one image's columns back to the image (adjoint of [`im2col`]).
fn col2im<T: Elem>(cols: &[T], g: &Geom, dst: &mut [T], ld: usize, off: usize) {
    for c in 0..g.c {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ld + off..row * ld + off + g.cols()];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kj - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (p, &v) in prow[ix0..ix0 + hi - lo].iter_mut().zip(srow) {
                            *p += v;
                        }
                    } else {
                        for (i, &v) in srow.iter().enumerate() {
                            prow[ix0 + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Column buffers hold at most this many elements; batches are chunked to fit.
const COL_BUDGET: usize = 1 << 17;

/// Forward columns are kept for the kernel gradient when they total at most this many elements.
const CACHE_LIMIT: usize = 1 << 22;

/// Chunks span at least this many output columns so the kernel packing is amortized.
const MIN_CHUNK_COLS: usize = 1;

fn chunk_len(rows: usize, ncols: usize, n: usize) -> usize {
    let by_budget = COL_BUDGET / (rows * ncols).max(1);
    by_budget.max(MIN_CHUNK_COLS.div_ceil(ncols.max(1))).clamp(1, n.max(1))
}

/// `[nb, c, p]` planes of samples `b0..b0+nb` as a `[c, nb·p]` matrix.
fn gather_planes<T: Elem>(src: &[T], b0: usize, nb: usize, c: usize, p: usize, dst: &mut [T]) {
    let ld = nb * p;
    for b in 0..nb {
        for ci in 0..c {
            let s = ((b0 + b) * c + ci) * p;
            dst[ci * ld + b * p..ci * ld + (b + 1) * p].copy_from_slice(&src[s..s + p]);
        }
    }
}

/// Inverse of [`gather_planes`].
fn scatter_planes<T: Elem>(src: &[T], b0: usize, nb: usize, c: usize, p: usize, dst: &mut [T]) {
    let ld = nb * p;
    for b in 0..nb {
        for ci in 0..c {
            let d = ((b0 + b) * c + ci) * p;
            dst[d..d + p].copy_from_slice(&src[ci * ld + b * p..ci * ld + (b + 1) * p]);
        }
    }
}

fn bias_check<T: Elem>(op: &'static str, bias: Option<&Tensor<T>>, c: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [c] {
            return shape_err(op, format!("bias shape {:?}, expected [{c}]", b.shape()));
        }
    }
    Ok(())
}

fn add_bias<T: Elem>(out: &mut [T], bias: &[T], batch: usize, plane: usize) {
    let c = bias.len();
    for b in 0..batch {
        for (ci, &bv) in bias.iter().enumerate() {
            let off = (b * c + ci) * plane;
            out[off..off + plane].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Elem>(g: &[T], batch: usize, c: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); c];
    for b in 0..batch {
        for (ci, acc) in gb.iter_mut().enumerate() {
            let off = (b * c + ci) * plane;
            *acc += g[off..off + plane].iter().copied().sum::<T>();
        }
    }
    gb
}

fn nchw<T: Elem>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => shape_err(op, format!("expected NCHW input, got {s:?}")),
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d<T: Elem>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    if stride == 0 {
        return invalid(OP, "stride must be positive");
    }
    let (n, c, h, w) = nchw(OP, input)?;
    let (co, ci, kh, kw) = match kernel.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => return shape_err(OP, format!("kernel must be OIkk, got {s:?}")),
    };
    if ci != c {
        return shape_err(OP, format!("input has {c} channels, kernel expects {ci}"));
    }
    if kh != kw {
        return shape_err(OP, "only square kernels are supported");
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return shape_err(OP, format!("kernel {kh} larger than padded input {h}x{w}"));
    }
    bias_check(OP, bias, co)?;
    let g = Geom {
        c,
        h,
        w,
        k: kh,
        stride,
        pad: padding,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
    };
    let (rows, ncols) = (g.rows(), g.cols());
    let in_sz = c * h * w;
    let out_sz = co * ncols;
    let x = input.data_rc();
    let wk = kernel.data_rc();
    let mut out = vec![T::zero(); n * out_sz];
    let nbmax = chunk_len(rows, ncols, n);
    let keep = kernel.requires_grad() && rows * ncols * n <= CACHE_LIMIT;
    let mut saved = Vec::new();
    let mut cols = vec![T::zero(); rows * nbmax * ncols];
    let mut tmp = vec![T::zero(); co * nbmax * ncols];
    for b0 in (0..n).step_by(nbmax) {
        let nb = nbmax.min(n - b0);
        let ld = nb * ncols;
        for b in 0..nb {
            im2col(&x[(b0 + b) * in_sz..(b0 + b + 1) * in_sz], &g, &mut cols, ld, b * ncols);
        }
        gemm(co, rows, ld, MatRef::row_major(&wk, rows, false), MatRef::row_major(&cols, ld, false), &mut tmp, false);
        scatter_planes(&tmp, b0, nb, co, ncols, &mut out);
        if keep {
            saved.push(cols[..rows * ld].to_vec());
        }
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias.data(), n, ncols);
    }
    let mut parents = vec![input, kernel];
    if let Some(b) = bias {
        parents.push(b);
    }
    let (rx, rw) = (input.requires_grad(), kernel.requires_grad());
    let rb = bias.map(|b| b.requires_grad()).unwrap_or(false);
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(vec![n, co, g.oh, g.ow], out, &parents, move |gout| {
        let mut gx = rx.then(|| vec![T::zero(); n * in_sz]);
        let mut gw = rw.then(|| vec![T::zero(); co * rows]);
        let mut cols = vec![T::zero(); rows * nbmax * ncols];
        let mut gt = vec![T::zero(); co * nbmax * ncols];
        for (chunk, b0) in (0..n).step_by(nbmax).enumerate() {
            let nb = nbmax.min(n - b0);
            let ld = nb * ncols;
            gather_planes(gout, b0, nb, co, ncols, &mut gt);
            if let Some(gw) = gw.as_mut() {
                let xcols = match saved.get(chunk) {
                    Some(c) => c.as_slice(),
                    None => {
                        for b in 0..nb {
                            im2col(&x[(b0 + b) * in_sz..(b0 + b + 1) * in_sz], &g, &mut cols, ld, b * ncols);
                        }
                        &cols[..]
                    }
                };
                // dW[co, rows] += dOut[co, ld] · cols^T[ld, rows]
                gemm(co, ld, rows, MatRef::row_major(&gt, ld, false), MatRef::row_major(xcols, ld, true), gw, b0 > 0);
            }
            if let Some(gx) = gx.as_mut() {
                // dCols[rows, ld] = W^T[rows, co] · dOut[co, ld]
                gemm(rows, co, ld, MatRef::row_major(&wk, rows, true), MatRef::row_major(&gt, ld, false), &mut cols, false);
                for b in 0..nb {
                    col2im(&cols, &g, &mut gx[(b0 + b) * in_sz..(b0 + b + 1) * in_sz], ld, b * ncols);
                }
            }
        }
        let mut res = vec![gx, gw];
        if has_bias {
            res.push(rb.then(|| bias_grad(gout, n, co, ncols)));
        }
        res
    }))
}

/// Transposed convolution (adjoint of [`conv2d`] w.r.t. its input).
/// Output extent is `(h - 1) * stride - 2 * padding + k`.
pub fn conv_transpose2d<T: Elem>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    if stride == 0 {
        return invalid(OP, "stride must be positive");
    }
    let (n, c, h, w) = nchw(OP, input)?;
    let (ci, co, kh, kw) = match kernel.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => return shape_err(OP, format!("kernel must be IOkk, got {s:?}")),
    };
    if ci != c {
        return shape_err(OP, format!("input has {c} channels, kernel expects {ci}"));
    }
    if kh != kw {
        return shape_err(OP, "only square kernels are supported");
    }
    let full_h = (h - 1) * stride + kh;
    let full_w = (w - 1) * stride + kw;
    if full_h <= 2 * padding || full_w <= 2 * padding {
        return shape_err(OP, "padding removes the whole output");
    }
    bias_check(OP, bias, co)?;
    // geometry of the equivalent forward conv that maps output -> input
    let g = Geom {
        c: co,
        h: full_h - 2 * padding,
        w: full_w - 2 * padding,
        k: kh,
        stride,
        pad: padding,
        oh: h,
        ow: w,
    };
    let (rows, ncols) = (g.rows(), g.cols());
    let in_sz = c * h * w;
    let out_plane = g.h * g.w;
    let out_sz = co * out_plane;
    let x = input.data_rc();
    let wk = kernel.data_rc();
    let mut out = vec![T::zero(); n * out_sz];
    let nbmax = chunk_len(rows, ncols, n);
    let mut cols = vec![T::zero(); rows * nbmax * ncols];
    let mut xt = vec![T::zero(); c * nbmax * ncols];
    for b0 in (0..n).step_by(nbmax) {
        let nb = nbmax.min(n - b0);
        let ld = nb * ncols;
        gather_planes(&x, b0, nb, c, ncols, &mut xt);
        // cols[rows, ld] = W^T[rows, ci] · x[ci, ld]
        gemm(rows, c, ld, MatRef::row_major(&wk, rows, true), MatRef::row_major(&xt, ld, false), &mut cols, false);
        for b in 0..nb {
            col2im(&cols, &g, &mut out[(b0 + b) * out_sz..(b0 + b + 1) * out_sz], ld, b * ncols);
        }
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias.data(), n, out_plane);
    }
    let mut parents = vec![input, kernel];
    if let Some(b) = bias {
        parents.push(b);
    }
    let (rx, rw) = (input.requires_grad(), kernel.requires_grad());
    let rb = bias.map(|b| b.requires_grad()).unwrap_or(false);
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(vec![n, co, g.h, g.w], out, &parents, move |gout| {
        let mut gx = rx.then(|| vec![T::zero(); n * in_sz]);
        let mut gw = rw.then(|| vec![T::zero(); c * rows]);
        let mut cols = vec![T::zero(); rows * nbmax * ncols];
        let mut xt = vec![T::zero(); c * nbmax * ncols];
        for b0 in (0..n).step_by(nbmax) {
            let nb = nbmax.min(n - b0);
            let ld = nb * ncols;
            for b in 0..nb {
                im2col(&gout[(b0 + b) * out_sz..(b0 + b + 1) * out_sz], &g, &mut cols, ld, b * ncols);
            }
            if let Some(gw) = gw.as_mut() {
                gather_planes(&x, b0, nb, c, ncols, &mut xt);
                // dW[ci, rows] += x[ci, ld] · cols^T[ld, rows]
                gemm(c, ld, rows, MatRef::row_major(&xt, ld, false), MatRef::row_major(&cols, ld, true), gw, b0 > 0);
            }
            if let Some(gx) = gx.as_mut() {
                // dx[ci, ld] = W[ci, rows] · cols[rows, ld]
                gemm(c, rows, ld, MatRef::row_major(&wk, rows, false), MatRef::row_major(&cols, ld, false), &mut xt, false);
                scatter_planes(&xt, b0, nb, c, ncols, gx);
            }
        }
        let mut res = vec![gx, gw];
        if has_bias {
            res.push(rb.then(|| bias_grad(gout, n, co, out_plane)));
        }
        res
    }))
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample_nearest<T: Elem>(input: &Tensor<T>, fy: usize, fx: usize) -> Result<Tensor<T>> {
    const OP: &str = "upsample_nearest";
    if fy == 0 || fx == 0 {
        return invalid(OP, "factors must be positive");
    }
    let (n, c, h, w) = nchw(OP, input)?;
    let (oh, ow) = (h * fy, w * fx);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let srow = &src[(oy / fy) * w..(oy / fy + 1) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = srow[ox / fx];
            }
        }
    }
    Ok(Tensor::from_op(vec![n, c, oh, ow], out, &[input], move |g| {
        let mut gx = vec![T::zero(); n * c * h * w];
        for p in 0..n * c {
            let src = &g[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut gx[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[(oy / fy) * w + ox / fx] += src[oy * ow + ox];
                }
            }
        }
        vec![Some(gx)]
    }))
}
