//! Elementwise arithmetic, limited broadcasting and full reductions.

use crate::elem::Elem;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

fn same_shape<T: Elem>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Strides of `small` inside `big`'s index space: 0 on broadcast axes.
fn broadcast_strides(op: &'static str, big: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if big.len() != small.len() {
        return shape_err(op, format!("rank {} vs {}", big.len(), small.len()));
    }
    let mut strides = vec![0; small.len()];
    let mut acc = 1;
    for d in (0..small.len()).rev() {
        if small[d] == big[d] {
            strides[d] = acc;
        } else if small[d] != 1 {
            return shape_err(op, format!("cannot broadcast {small:?} to {big:?}"));
        }
        acc *= small[d];
    }
    Ok(strides)
}

/// Calls `f(i, j)` for every linear index `i` of `shape` with the matching
/// offset `j` of a broadcast operand with the given strides.
fn for_each_broadcast(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer: usize = shape[..rank - 1].iter().product();
    let mut counter = vec![0usize; rank.saturating_sub(1)];
    let mut base = 0usize;
    let mut i = 0usize;
    for _ in 0..outer {
        let mut j = base;
        for _ in 0..inner {
            f(i, j);
            i += 1;
            j += inner_stride;
        }
        // odometer over the outer axes
        for d in (0..rank - 1).rev() {
            counter[d] += 1;
            base += strides[d];
            if counter[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            counter[d] = 0;
        }
    }
}

impl<T: Elem> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data: Vec<T> = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], move |g| {
            vec![ra.then(|| g.to_vec()), rb.then(|| g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data: Vec<T> = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], move |g| {
            vec![
                ra.then(|| g.to_vec()),
                rb.then(|| g.iter().map(|&v| -v).collect()),
            ]
        }))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data: Vec<T> = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        let (a, b) = (self.data_rc(), other.data_rc());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], move |g| {
            vec![
                ra.then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect()),
                rb.then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect()),
            ]
        }))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v + s).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], |g| vec![Some(g.to_vec())])
    }

    pub fn square(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * v).collect();
        let x = self.data_rc();
        let two = T::one() + T::one();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            vec![Some(g.iter().zip(x.iter()).map(|(&g, &x)| two * g * x).collect())]
        })
    }

    /// `self + other`, where `other` has the same rank and every axis either
    /// matches or has extent 1.
    pub fn add_broadcast(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let strides = broadcast_strides("add_broadcast", self.shape(), other.shape())?;
        let x = self.data();
        let y = other.data();
        let mut out = x.to_vec();
        for_each_broadcast(self.shape(), &strides, |i, j| out[i] += y[j]);
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        let shape = self.shape().to_vec();
        let ylen = other.numel();
        Ok(Tensor::from_op(shape.clone(), out, &[self, other], move |g| {
            let gy = rb.then(|| {
                let mut gy = vec![T::zero(); ylen];
                for_each_broadcast(&shape, &strides, |i, j| gy[j] += g[i]);
                gy
            });
            vec![ra.then(|| g.to_vec()), gy]
        }))
    }

    /// `self * other` with the same broadcasting rule as [`Tensor::add_broadcast`].
    pub fn mul_broadcast(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let strides = broadcast_strides("mul_broadcast", self.shape(), other.shape())?;
        let x = self.data_rc();
        let y = other.data_rc();
        let mut out = vec![T::zero(); self.numel()];
        for_each_broadcast(self.shape(), &strides, |i, j| out[i] = x[i] * y[j]);
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        let shape = self.shape().to_vec();
        let ylen = other.numel();
        Ok(Tensor::from_op(shape.clone(), out, &[self, other], move |g| {
            let gx = ra.then(|| {
                let mut gx = vec![T::zero(); g.len()];
                for_each_broadcast(&shape, &strides, |i, j| gx[i] = g[i] * y[j]);
                gx
            });
            let gy = rb.then(|| {
                let mut gy = vec![T::zero(); ylen];
                for_each_broadcast(&shape, &strides, |i, j| gy[j] += g[i] * x[i]);
                gy
            });
            vec![gx, gy]
        }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_usize(self.numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Mean squared difference of two same-shape tensors.
    pub fn mse(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.sub(other)?.square().mean())
    }
}
