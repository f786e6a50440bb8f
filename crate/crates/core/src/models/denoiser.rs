//! Conditional v-prediction U-Net.
//!
//! A patchify stem maps the (latent) image, concatenated with the
//! upsampled spatial features, to the first of three resolutions. The
//! coarsest level holds a cross-attention block over the global token
//! sequence. A transposed convolution with zero-initialised weights maps
//! back to the input grid.

use perco_tensor::{attention, concat, conv2d, conv_transpose2d, upsample_nearest, Elem, ParamId, ParamStore, Rng, Session, Tensor};

use super::layers::{Linear, Norm, ResBlock};
use crate::error::{mismatch, Result};

pub const EXT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub side: usize,
    pub patch: usize,
    pub widths: [usize; 3],
    pub cond_channels: Option<usize>,
    pub ctx_dim: usize,
    pub attn_dim: usize,
    pub max_groups: usize,
    pub steps: usize,
}

#[derive(Clone, Debug)]
struct CrossAttention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    w_base: ParamId,
    w_ext: Option<ParamId>,
    b_in: ParamId,
    temb1: Linear,
    temb2: Linear,
    enc0: ResBlock,
    down0: super::layers::Conv,
    enc1: ResBlock,
    down1: super::layers::Conv,
    mid0: ResBlock,
    attn: CrossAttention,
    mid1: ResBlock,
    dec1: ResBlock,
    dec0: ResBlock,
    out_norm: Norm,
    w_out: ParamId,
    b_out: ParamId,
}

/// Sinusoidal embedding of grid timesteps rescaled to a 0..1000 range.
pub fn timestep_embedding<T: Elem>(t: &[usize], steps: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let pos = ti as f64 * 1000.0 / steps as f64;
        let row_start = out.len();
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            out.push(T::from_f64_lossy((pos * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            out.push(T::from_f64_lossy((pos * freq).cos()));
        }
        out.resize(row_start + dim, T::zero());
    }
    Tensor::new(&[t.len(), dim], out).expect("sized above")
}

impl DenoiserNet {
    pub fn new<T: Elem>(store: &mut ParamStore<T>, config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let [w0, w1, w2] = config.widths;
        let (p, c) = (config.patch, config.in_channels);
        let g = config.max_groups;
        let std_in = (1.0 / (c * p * p) as f64).sqrt();
        let w_base = store.add_normal("den.in.w_base", &[w0, c, p, p], std_in, rng)?;
        let w_ext = match config.cond_channels {
            Some(cc) => Some(store.add_normal("den.in.w_ext", &[w0, cc, p, p], EXT_INIT_STD, rng)?),
            None => None,
        };
        let b_in = store.add_fill("den.in.b", &[w0], 0.0)?;
        let td = 4 * w0;
        let temb1 = Linear::new(store, "den.temb1", w0, td, rng)?;
        let temb2 = Linear::new(store, "den.temb2", td, td, rng)?;
        let t = Some(td);
        let enc0 = ResBlock::new(store, "den.enc0", w0, w0, t, g, rng)?;
        let down0 = super::layers::Conv::new(store, "den.down0", w0, w1, 3, 2, 1, rng)?;
        let enc1 = ResBlock::new(store, "den.enc1", w1, w1, t, g, rng)?;
        let down1 = super::layers::Conv::new(store, "den.down1", w1, w2, 3, 2, 1, rng)?;
        let mid0 = ResBlock::new(store, "den.mid0", w2, w2, t, g, rng)?;
        let a = config.attn_dim;
        let attn = CrossAttention {
            norm: Norm::new(store, "den.attn.norm", w2, g)?,
            q: Linear::new(store, "den.attn.q", w2, a, rng)?,
            k: Linear::new(store, "den.attn.k", config.ctx_dim, a, rng)?,
            v: Linear::new(store, "den.attn.v", config.ctx_dim, a, rng)?,
            o: Linear::with_std(store, "den.attn.o", a, w2, 0.0, rng)?,
        };
        let mid1 = ResBlock::new(store, "den.mid1", w2, w2, t, g, rng)?;
        let dec1 = ResBlock::new(store, "den.dec1", w2 + w1, w1, t, g, rng)?;
        let dec0 = ResBlock::new(store, "den.dec0", w1 + w0, w0, t, g, rng)?;
        let out_norm = Norm::new(store, "den.out.norm", w0, g)?;
        let w_out = store.add_fill("den.out.w", &[w0, c, p, p], 0.0)?;
        let b_out = store.add_fill("den.out.b", &[c], 0.0)?;
        Ok(DenoiserNet {
            config,
            w_base,
            w_ext,
            b_in,
            temb1,
            temb2,
            enc0,
            down0,
            enc1,
            down1,
            mid0,
            attn,
            mid1,
            dec1,
            dec0,
            out_norm,
            w_out,
            b_out,
        })
    }

    /// Input-channel count of the first convolution.
    pub fn first_conv_in_channels<T: Elem>(&self, store: &ParamStore<T>) -> usize {
        let base = store.get(self.w_base).shape[1];
        base + self.w_ext.map_or(0, |e| store.get(e).shape[1])
    }

    pub fn extension_param(&self) -> Option<ParamId> {
        self.w_ext
    }

    /// Parameters of the linear layers (timestep MLP, timestep projections
    /// in every block and the attention projections).
    pub fn linear_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = [&self.temb1, &self.temb2, &self.attn.q, &self.attn.k, &self.attn.v, &self.attn.o]
            .iter()
            .flat_map(|l| l.ids())
            .collect();
        for b in [&self.enc0, &self.enc1, &self.mid0, &self.mid1, &self.dec1, &self.dec0] {
            ids.extend(b.linear_ids());
        }
        ids
    }

    /// `x_t: [B, C, S, S]`, `t`: one grid index per sample, `z_l`: spatial
    /// features `[B, K, g, g]` (required iff local conditioning is built),
    /// `ctx`: global token sequence `[B, L, E]`.
    pub fn forward<T: Elem>(&self, s: &Session<T>, x_t: &Tensor<T>, t: &[usize], z_l: Option<&Tensor<T>>, ctx: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        if x_t.rank() != 4 || x_t.dim(1) != cfg.in_channels || x_t.dim(2) != cfg.side || x_t.dim(3) != cfg.side {
            return mismatch(format!("denoiser expects [B, {}, {}, {}], got {:?}", cfg.in_channels, cfg.side, cfg.side, x_t.shape()));
        }
        let b = x_t.dim(0);
        if t.len() != b || ctx.rank() != 3 || ctx.dim(0) != b || ctx.dim(2) != cfg.ctx_dim {
            return mismatch(format!("timesteps {} / context {:?} for batch {b}", t.len(), ctx.shape()));
        }
        let h = match (self.w_ext, z_l) {
            (Some(ext), Some(z)) => conditioned_stem(x_t, z, s.param(self.w_base), s.param(ext), s.param(self.b_in), cfg.patch)?,
            (None, None) => conv2d(x_t, s.param(self.w_base), Some(s.param(self.b_in)), cfg.patch, 0)?,
            (Some(_), None) => return mismatch("spatial features required by this denoiser"),
            (None, Some(_)) => return mismatch("this denoiser was built without spatial conditioning"),
        };
        let temb = timestep_embedding::<T>(t, cfg.steps, cfg.widths[0]);
        let temb = self.temb2.forward(s, &self.temb1.forward(s, &temb)?.silu())?.silu();
        let e = Some(&temb);
        let s0 = self.enc0.forward(s, &h, e)?;
        let s1 = self.enc1.forward(s, &self.down0.forward(s, &s0)?, e)?;
        let mut m = self.mid0.forward(s, &self.down1.forward(s, &s1)?, e)?;
        m = self.cross_attend(s, &m, ctx)?;
        m = self.mid1.forward(s, &m, e)?;
        let u1 = concat(&[&upsample_nearest(&m, 2, 2)?, &s1], 1)?;
        let u1 = self.dec1.forward(s, &u1, e)?;
        let u0 = concat(&[&upsample_nearest(&u1, 2, 2)?, &s0], 1)?;
        let u0 = self.dec0.forward(s, &u0, e)?;
        let o = self.out_norm.forward(s, &u0)?.silu();
        Ok(conv_transpose2d(&o, s.param(self.w_out), Some(s.param(self.b_out)), cfg.patch, 0)?)
    }

    fn cross_attend<T: Elem>(&self, s: &Session<T>, h: &Tensor<T>, ctx: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, hh, ww) = (h.dim(0), h.dim(1), h.dim(2), h.dim(3));
        let tokens = self.attn.norm.forward(s, h)?.reshape(&[b, c, hh * ww])?.permute(&[0, 2, 1])?;
        let q = self.attn.q.forward(s, &tokens)?;
        let k = self.attn.k.forward(s, ctx)?;
        let v = self.attn.v.forward(s, ctx)?;
        let a = self.attn.o.forward(s, &attention(&q, &k, &v)?)?;
        let a = a.permute(&[0, 2, 1])?.reshape(&[b, c, hh, ww])?;
        Ok(h.add(&a)?)
    }
}

/// Patchify convolution of `x_t` joined with upsampled `z_l`, kernels
/// `w_base` and `w_ext` covering the two channel groups. When every patch
/// lies inside one grid cell, the `z_l` part is computed as a 1×1
/// convolution on the grid and upsampled afterwards.
pub fn conditioned_stem<T: Elem>(
    x_t: &Tensor<T>,
    z_l: &Tensor<T>,
    w_base: &Tensor<T>,
    w_ext: &Tensor<T>,
    bias: &Tensor<T>,
    patch: usize,
) -> Result<Tensor<T>> {
    let (h, w) = (x_t.dim(2), x_t.dim(3));
    let (gh, gw) = (z_l.dim(2).max(1), z_l.dim(3).max(1));
    let aligned = x_t.rank() == 4 && z_l.rank() == 4 && w_ext.rank() == 4 && h % gh == 0 && w % gw == 0 && (h / gh) % patch == 0 && (w / gw) % patch == 0;
    if !aligned {
        let w = concat(&[w_base, w_ext], 1)?;
        return Ok(conv2d(&condition_concat(x_t, z_l)?, &w, Some(bias), patch, 0)?);
    }
    let (co, k) = (w_ext.dim(0), w_ext.dim(1));
    let ones = Tensor::full(&[patch * patch, 1], T::one());
    let w1 = w_ext.reshape(&[co * k, patch * patch])?.matmul(&ones)?.reshape(&[co, k, 1, 1])?;
    let cells = upsample_nearest(&conv2d(z_l, &w1, None, 1, 0)?, h / gh / patch, w / gw / patch)?;
    Ok(conv2d(x_t, w_base, Some(bias), patch, 0)?.add(&cells)?)
}

/// Nearest-neighbour upsampling of `z_l` to the spatial size of `x_t`,
/// concatenated after `x_t` on the channel axis.
pub fn condition_concat<T: Elem>(x_t: &Tensor<T>, z_l: &Tensor<T>) -> Result<Tensor<T>> {
    if x_t.rank() != 4 || z_l.rank() != 4 || x_t.dim(0) != z_l.dim(0) {
        return mismatch(format!("cannot join {:?} with {:?}", x_t.shape(), z_l.shape()));
    }
    let (h, w, gh, gw) = (x_t.dim(2), x_t.dim(3), z_l.dim(2), z_l.dim(3));
    if h % gh != 0 || w % gw != 0 {
        return mismatch(format!("grid {gh}×{gw} does not divide {h}×{w}"));
    }
    let up = upsample_nearest(z_l, h / gh, w / gw)?;
    Ok(concat(&[x_t, &up], 1)?)
}
