use crate::elem::Elem;
use crate::tensor::Tensor;

fn sigmoid<T: Elem>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Elem> Tensor<T> {
    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        let sig: Vec<T> = self.data().iter().map(|&v| sigmoid(v)).collect();
        let data = self.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let x = self.data_rc();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            let gx = g
                .iter()
                .zip(x.iter())
                .zip(&sig)
                .map(|((&g, &x), &s)| g * s * (T::one() + x * (T::one() - s)))
                .collect();
            vec![Some(gx)]
        })
    }

    /// Elementwise `1 / x`.
    pub fn recip(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| T::one() / v).collect();
        let y = std::rc::Rc::new(data.clone());
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            vec![Some(g.iter().zip(y.iter()).map(|(&g, &y)| -g * y * y).collect())]
        })
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Tensor<T> {
        let row = *self.shape().last().unwrap();
        let mut out = self.to_vec();
        for r in out.chunks_mut(row) {
            let m = r.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in r.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in r.iter_mut() {
                *v = *v / z;
            }
        }
        let y = std::rc::Rc::new(out.clone());
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |g| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), dst) in g.chunks(row).zip(y.chunks(row)).zip(gx.chunks_mut(row)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::new(&[2, 3], vec![1.0, 2.0, 3.0, 1000.0, 1000.0, 1000.0]).unwrap();
        let y = x.softmax();
        for r in y.data().chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((y.data()[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn silu_at_zero() {
        let x = Tensor::<f64>::leaf(&[1], vec![0.0]).unwrap();
        let y = x.silu();
        assert_eq!(y.item(), 0.0);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 0.5);
    }
}
