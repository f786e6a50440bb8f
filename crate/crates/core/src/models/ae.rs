//! Small convolutional autoencoder, 3×R×R ↔ 4×(R/4)×(R/4).
//!
//! Images enter as values in `[-1, 1]`. Latents are divided by a stored
//! scale so that they have roughly unit variance.

use perco_tensor::{conv_transpose2d, Elem, ParamId, ParamStore, Rng, Session, Tensor};

use super::layers::Conv;
use crate::error::Result;

pub const FEATURE_CHANNELS: usize = 64;

#[derive(Clone, Debug)]
struct Up {
    w: ParamId,
    b: ParamId,
}

impl Up {
    fn new<T: Elem>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut Rng) -> Result<Self> {
        let w = store.add_normal(format!("{name}.w"), &[c_in, c_out, 2, 2], (1.0 / c_in as f64).sqrt(), rng)?;
        let b = store.add_fill(format!("{name}.b"), &[c_out], 0.0)?;
        Ok(Up { w, b })
    }

    fn forward<T: Elem>(&self, s: &Session<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(conv_transpose2d(x, s.param(self.w), Some(s.param(self.b)), 2, 0)?)
    }
}

#[derive(Clone, Debug)]
pub struct TinyAutoencoder {
    e0: Conv,
    e1: Conv,
    e2: Conv,
    e3: Conv,
    d0: Conv,
    d1: Conv,
    u0: Up,
    d2: Conv,
    u1: Up,
    d3: Conv,
    pub scale: ParamId,
    pub latent_channels: usize,
}

impl TinyAutoencoder {
    pub fn new<T: Elem>(store: &mut ParamStore<T>, latent_channels: usize, rng: &mut Rng) -> Result<Self> {
        let f = FEATURE_CHANNELS;
        let ae = TinyAutoencoder {
            e0: Conv::new(store, "ae.e0", 3, 32, 3, 1, 1, rng)?,
            e1: Conv::new(store, "ae.e1", 32, f, 4, 2, 1, rng)?,
            e2: Conv::new(store, "ae.e2", f, f, 4, 2, 1, rng)?,
            e3: Conv::new(store, "ae.e3", f, latent_channels, 1, 1, 0, rng)?,
            d0: Conv::new(store, "ae.d0", latent_channels, f, 1, 1, 0, rng)?,
            d1: Conv::new(store, "ae.d1", f, f, 3, 1, 1, rng)?,
            u0: Up::new(store, "ae.u0", f, f, rng)?,
            d2: Conv::new(store, "ae.d2", f, 32, 3, 1, 1, rng)?,
            u1: Up::new(store, "ae.u1", 32, 32, rng)?,
            d3: Conv::new(store, "ae.d3", 32, 3, 3, 1, 1, rng)?,
            scale: store.add_fill("ae.scale", &[1], 1.0)?,
            latent_channels,
        };
        Ok(ae)
    }

    /// Pooling-ready feature map `[B, 64, R/4, R/4]`.
    pub fn features<T: Elem>(&self, s: &Session<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.e0.forward(s, x)?.silu();
        let h = self.e1.forward(s, &h)?.silu();
        Ok(self.e2.forward(s, &h)?.silu())
    }

    /// Unscaled latent.
    pub fn encode_raw<T: Elem>(&self, s: &Session<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.e3.forward(s, &self.features(s, x)?)
    }

    pub fn decode_raw<T: Elem>(&self, s: &Session<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.d0.forward(s, z)?.silu();
        let h = self.d1.forward(s, &h)?.silu();
        let h = self.u0.forward(s, &h)?.silu();
        let h = self.d2.forward(s, &h)?.silu();
        let h = self.u1.forward(s, &h)?.silu();
        self.d3.forward(s, &h)
    }

    fn scale_value<T: Elem>(&self, s: &Session<T>) -> T {
        s.param(self.scale).data()[0]
    }

    pub fn encode<T: Elem>(&self, s: &Session<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let inv = T::one() / self.scale_value(s);
        Ok(self.encode_raw(s, x)?.scale(inv))
    }

    pub fn decode<T: Elem>(&self, s: &Session<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let sc = self.scale_value(s);
        self.decode_raw(s, &z.scale(sc))
    }

    /// Mean-pooled features, `[B, 64]` as rows.
    pub fn pooled_features<T: Elem>(&self, s: &Session<T>, x: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        Ok(mean_pool(&self.features(s, x)?))
    }
}

/// Spatial mean per channel of `[B, C, H, W]`.
pub fn mean_pool<T: Elem>(h: &Tensor<T>) -> Vec<Vec<f64>> {
    let (b, c) = (h.dim(0), h.dim(1));
    let hw = h.dim(2) * h.dim(3);
    let d = h.data();
    (0..b)
        .map(|bi| {
            (0..c)
                .map(|ci| {
                    let o = (bi * c + ci) * hw;
                    d[o..o + hw].iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / hw as f64
                })
                .collect()
        })
        .collect()
}
