use crate::elem::Elem;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Group normalization over `[N, C, ...]` with per-channel affine
/// parameters. `groups == 1` gives layer normalization over all non-batch
/// axes.
pub fn group_norm<T: Elem>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<Tensor<T>> {
    const OP: &str = "group_norm";
    if input.rank() < 2 {
        return shape_err(OP, format!("need [N, C, ...], got {:?}", input.shape()));
    }
    let n = input.dim(0);
    let c = input.dim(1);
    if groups == 0 || c % groups != 0 {
        return invalid(OP, format!("{c} channels not divisible into {groups} groups"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(OP, format!("affine params must be [{c}]"));
    }
    let spatial: usize = input.shape()[2..].iter().product();
    let cpg = c / groups;
    let gsize = cpg * spatial;
    let eps = T::from_f64_lossy(eps);
    let x = input.data();
    let gm = gamma.data_rc();
    let bt = beta.data();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * groups];
    let gs = T::from_usize(gsize).unwrap();
    for b in 0..n {
        for gi in 0..groups {
            let off = (b * c + gi * cpg) * spatial;
            let seg = &x[off..off + gsize];
            let mean = seg.iter().copied().sum::<T>() / gs;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / gs;
            let is = T::one() / (var + eps).sqrt();
            inv_std[b * groups + gi] = is;
            for ch in 0..cpg {
                let cidx = gi * cpg + ch;
                for s in 0..spatial {
                    let i = off + ch * spatial + s;
                    let xh = (x[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = xh * gm[cidx] + bt[cidx];
                }
            }
        }
    }
    let (rx, rg, rb) = (input.requires_grad(), gamma.requires_grad(), beta.requires_grad());
    Ok(Tensor::from_op(input.shape().to_vec(), out, &[input, gamma, beta], move |g| {
        let mut gg = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        let mut gx = rx.then(|| vec![T::zero(); g.len()]);
        for b in 0..n {
            for gi in 0..groups {
                let off = (b * c + gi * cpg) * spatial;
                let mut sum_dy = T::zero();
                let mut sum_dy_xh = T::zero();
                for ch in 0..cpg {
                    let cidx = gi * cpg + ch;
                    let mut cg = T::zero();
                    let mut cb = T::zero();
                    for s in 0..spatial {
                        let i = off + ch * spatial + s;
                        cg += g[i] * xhat[i];
                        cb += g[i];
                    }
                    gg[cidx] += cg;
                    gb[cidx] += cb;
                    sum_dy += cb * gm[cidx];
                    sum_dy_xh += cg * gm[cidx];
                }
                if let Some(gx) = gx.as_mut() {
                    let is = inv_std[b * groups + gi];
                    let mdy = sum_dy / gs;
                    let mdyx = sum_dy_xh / gs;
                    for ch in 0..cpg {
                        let cidx = gi * cpg + ch;
                        for s in 0..spatial {
                            let i = off + ch * spatial + s;
                            let dyh = g[i] * gm[cidx];
                            gx[i] = is * (dyh - mdy - xhat[i] * mdyx);
                        }
                    }
                }
            }
        }
        vec![gx, rg.then_some(gg), rb.then_some(gb)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_each_group() {
        let x = Tensor::<f64>::new(&[1, 4, 2], vec![1.0, 3.0, 5.0, 7.0, -2.0, 2.0, 0.0, 4.0]).unwrap();
        let y = group_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 2, 0.0).unwrap();
        for g in 0..2 {
            let seg = &y.data()[g * 4..(g + 1) * 4];
            let m: f64 = seg.iter().sum::<f64>() / 4.0;
            let v: f64 = seg.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        assert!(group_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 3, 1e-5).is_err());
    }
}
