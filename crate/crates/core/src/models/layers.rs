//! Parameterised building blocks shared by the networks.

use perco_tensor::{conv2d, group_norm, Elem, ParamId, ParamStore, Rng, Session, Tensor};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Elem>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_std(store, name, fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn with_std<T: Elem>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let w = store.add_normal(format!("{name}.w"), &[fan_in, fan_out], std, rng)?;
        let b = store.add_fill(format!("{name}.b"), &[fan_out], 0.0)?;
        Ok(Linear { w, b, fan_out })
    }

    /// `x: [.., fan_in]` of rank 2 or 3.
    pub fn forward<T: Elem>(&self, s: &Session<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(s.param(self.w))?;
        let mut bshape = vec![1; y.rank()];
        *bshape.last_mut().unwrap() = self.fan_out;
        Ok(y.add_broadcast(&s.param(self.b).reshape(&bshape)?)?)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = (1.0 / (c_in * k * k) as f64).sqrt();
        Self::with_std(store, name, c_in, c_out, k, stride, padding, std, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<T: Elem>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = if std == 0.0 {
            store.add_fill(format!("{name}.w"), &[c_out, c_in, k, k], 0.0)?
        } else {
            store.add_normal(format!("{name}.w"), &[c_out, c_in, k, k], std, rng)?
        };
        let b = store.add_fill(format!("{name}.b"), &[c_out], 0.0)?;
        Ok(Conv { w, b, stride, padding })
    }

    pub fn forward<T: Elem>(&self, s: &Session<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(conv2d(x, s.param(self.w), Some(s.param(self.b)), self.stride, self.padding)?)
    }
}

/// Largest divisor of `channels` not above `max_groups`.
pub fn groups_for(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new<T: Elem>(store: &mut ParamStore<T>, name: &str, channels: usize, max_groups: usize) -> Result<Self> {
        let gamma = store.add_fill(format!("{name}.gamma"), &[channels], 1.0)?;
        let beta = store.add_fill(format!("{name}.beta"), &[channels], 0.0)?;
        Ok(Norm {
            gamma,
            beta,
            groups: groups_for(channels, max_groups),
        })
    }

    pub fn forward<T: Elem>(&self, s: &Session<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(group_norm(x, s.param(self.gamma), s.param(self.beta), self.groups, 1e-5)?)
    }
}

/// Pre-activation residual block with an optional timestep injection.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Option<Linear>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
    c_out: usize,
}

impl ResBlock {
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        temb_dim: Option<usize>,
        max_groups: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let norm1 = Norm::new(store, &format!("{name}.norm1"), c_in, max_groups)?;
        let conv1 = Conv::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng)?;
        let temb = match temb_dim {
            Some(d) => Some(Linear::new(store, &format!("{name}.temb"), d, c_out, rng)?),
            None => None,
        };
        let norm2 = Norm::new(store, &format!("{name}.norm2"), c_out, max_groups)?;
        let conv2 = Conv::with_std(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, 0.0, rng)?;
        let skip = if c_in != c_out {
            Some(Conv::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng)?)
        } else {
            None
        };
        Ok(ResBlock {
            norm1,
            conv1,
            temb,
            norm2,
            conv2,
            skip,
            c_out,
        })
    }

    /// `temb` is the already activated timestep embedding `[B, D]`.
    pub fn forward<T: Elem>(&self, s: &Session<T>, x: &Tensor<T>, temb: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut h = self.conv1.forward(s, &self.norm1.forward(s, x)?.silu())?;
        if let (Some(lin), Some(e)) = (&self.temb, temb) {
            let proj = lin.forward(s, e)?.reshape(&[e.dim(0), self.c_out, 1, 1])?;
            h = h.add_broadcast(&proj)?;
        }
        let h = self.conv2.forward(s, &self.norm2.forward(s, &h)?.silu())?;
        let base = match &self.skip {
            Some(c) => c.forward(s, x)?,
            None => x.clone(),
        };
        Ok(base.add(&h)?)
    }

    pub fn linear_ids(&self) -> Vec<ParamId> {
        self.temb.iter().flat_map(|l| l.ids()).collect()
    }
}
