//! Matrix products, 2-D and batched 3-D, with optional operand transposes.

use crate::elem::{gemm, Elem, MatRef};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

struct Dims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_cols: usize,
    b_cols: usize,
    /// rhs is shared across the batch
    b_shared: bool,
}

fn dims<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Dims> {
    let (batch, ar, ac) = match a.shape() {
        [r, c] => (1, *r, *c),
        [bt, r, c] => (*bt, *r, *c),
        s => return shape_err("matmul", format!("lhs rank must be 2 or 3, got {s:?}")),
    };
    let (bb, br, bc, b_shared) = match b.shape() {
        [r, c] => (1, *r, *c, batch > 1),
        [bt, r, c] => (*bt, *r, *c, false),
        s => return shape_err("matmul", format!("rhs rank must be 2 or 3, got {s:?}")),
    };
    if !b_shared && bb != batch {
        return shape_err("matmul", format!("batch {batch} vs {bb}"));
    }
    if a.rank() == 2 && b.rank() == 3 {
        return shape_err("matmul", "2-D lhs with 3-D rhs");
    }
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return shape_err(
            "matmul",
            format!("inner dims differ: {:?} x {:?} (ta={ta}, tb={tb})", a.shape(), b.shape()),
        );
    }
    Ok(Dims {
        batch,
        m,
        k,
        n,
        a_cols: ac,
        b_cols: bc,
        b_shared,
    })
}

impl<T: Elem> Tensor<T> {
    /// `self · other`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` transposes the last two axes when
    /// the corresponding flag is set. A 2-D rhs is shared across a 3-D lhs
    /// batch.
    pub fn matmul_t(&self, other: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
        let d = dims(self, other, ta, tb)?;
        let (m, k, n) = (d.m, d.k, d.n);
        let a_sz = m * k;
        let b_sz = k * n;
        let mut out = vec![T::zero(); d.batch * m * n];
        let a = self.data();
        let b = other.data();
        for bi in 0..d.batch {
            let bo = if d.b_shared { 0 } else { bi * b_sz };
            gemm(
                m,
                k,
                n,
                MatRef::row_major(&a[bi * a_sz..(bi + 1) * a_sz], d.a_cols, ta),
                MatRef::row_major(&b[bo..bo + b_sz], d.b_cols, tb),
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let shape = if self.rank() == 3 {
            vec![d.batch, m, n]
        } else {
            vec![m, n]
        };
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        let (ad, bd) = (self.data_rc(), other.data_rc());
        let (batch, a_cols, b_cols, b_shared) = (d.batch, d.a_cols, d.b_cols, d.b_shared);
        Ok(Tensor::from_op(shape, out, &[self, other], move |g| {
            let ga = ra.then(|| {
                let mut ga = vec![T::zero(); batch * a_sz];
                for bi in 0..batch {
                    let bo = if b_shared { 0 } else { bi * b_sz };
                    let bsl = &bd[bo..bo + b_sz];
                    let gsl = &g[bi * m * n..(bi + 1) * m * n];
                    let dst = &mut ga[bi * a_sz..(bi + 1) * a_sz];
                    if !ta {
                        // dA[m,k] = dC[m,n] · op(B)^T[n,k]
                        gemm(m, n, k, MatRef::row_major(gsl, n, false), MatRef::row_major(bsl, b_cols, !tb), dst, false);
                    } else {
                        // dA[k,m] = op(B)[k,n] · dC^T[n,m]
                        gemm(k, n, m, MatRef::row_major(bsl, b_cols, tb), MatRef::row_major(gsl, n, true), dst, false);
                    }
                }
                ga
            });
            let gb = rb.then(|| {
                let nb = if b_shared { 1 } else { batch };
                let mut gb = vec![T::zero(); nb * b_sz];
                for bi in 0..batch {
                    let bo = if b_shared { 0 } else { bi * b_sz };
                    let asl = &ad[bi * a_sz..(bi + 1) * a_sz];
                    let gsl = &g[bi * m * n..(bi + 1) * m * n];
                    let dst = &mut gb[bo..bo + b_sz];
                    let acc = b_shared && bi > 0;
                    if !tb {
                        // dB[k,n] = op(A)^T[k,m] · dC[m,n]
                        gemm(k, m, n, MatRef::row_major(asl, a_cols, !ta), MatRef::row_major(gsl, n, false), dst, acc);
                    } else {
                        // dB[n,k] = dC^T[n,m] · op(A)[m,k]
                        gemm(n, m, k, MatRef::row_major(gsl, n, true), MatRef::row_major(asl, a_cols, ta), dst, acc);
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }
}
