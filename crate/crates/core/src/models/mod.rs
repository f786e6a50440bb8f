//! Learnable networks and the bundle that ties them to one parameter store.

pub mod ae;
pub mod config;
pub mod denoiser;
pub mod hyper;
pub mod layers;
pub mod text;

use std::fs;
use std::path::Path;

use perco_tensor::checkpoint::{read_records, write_records, Record};
use perco_tensor::{Elem, ParamStore, Rng, Session, Tensor};

pub use ae::TinyAutoencoder;
pub use config::{GlobalCondition, ModelConfig, TrainableSubset, PQ_FEATURE_DIM};
pub use denoiser::{condition_concat, conditioned_stem, DenoiserConfig, DenoiserNet};
pub use hyper::HyperEncoder;
pub use layers::Linear;
pub use text::TextEmbedder;

use crate::diffusion::{Branch, Denoise, NoiseSchedule};
use crate::error::{format_err, mismatch, Result};
use crate::quantize::{Codebook, ProductQuantizer};

pub const CONFIG_FILE: &str = "config.txt";
pub const PARAMS_FILE: &str = "params.pckp";

/// Global condition for one batch: one entry per sample, `None` = null.
#[derive(Clone, Debug)]
pub enum GlobalInput {
    Text(Vec<Option<Vec<usize>>>),
    Pq(Vec<Option<Vec<f32>>>),
    Null(usize),
}

impl GlobalInput {
    pub fn len(&self) -> usize {
        match self {
            GlobalInput::Text(v) => v.len(),
            GlobalInput::Pq(v) => v.len(),
            GlobalInput::Null(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct ModelBundle<T: Elem> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub ae: Option<TinyAutoencoder>,
    pub hyper: HyperEncoder,
    pub text: TextEmbedder,
    pub global_proj: Option<Linear>,
    pub denoiser: DenoiserNet,
    pub codebook: Codebook<T>,
    pub pq: Option<ProductQuantizer>,
    pub schedule: NoiseSchedule,
}

impl<T: Elem> ModelBundle<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed).fork(0x1417);
        let mut params = ParamStore::new();
        let ae = if config.ae_enabled {
            Some(TinyAutoencoder::new(&mut params, config.ae_channels, &mut rng)?)
        } else {
            None
        };
        let (lc, side) = config.latent_shape();
        let hyper = HyperEncoder::new(
            &mut params,
            lc,
            side,
            config.grid_h,
            config.he_width,
            config.he_blocks,
            config.code_dim,
            config.norm_groups,
            &mut rng,
        )?;
        let text = TextEmbedder::new(&mut params, config.vocab_size, config.max_tokens, config.text_dim, &mut rng)?;
        let global_proj = if config.global == GlobalCondition::Pq {
            Some(Linear::new(&mut params, "global.proj", PQ_FEATURE_DIM, config.text_dim, &mut rng)?)
        } else {
            None
        };
        let denoiser = DenoiserNet::new(
            &mut params,
            DenoiserConfig {
                in_channels: lc,
                side,
                patch: config.patch,
                widths: config.widths,
                cond_channels: config.local_cond.then_some(config.code_dim),
                ctx_dim: config.text_dim,
                attn_dim: config.attn_dim,
                max_groups: config.norm_groups,
                steps: config.steps,
            },
            &mut rng,
        )?;
        let codebook = Codebook::from_codes(config.code_dim, rng.normal_vec(config.codebook_size * config.code_dim, 1.0))?;
        let schedule = NoiseSchedule::new(config.steps)?;
        let mut bundle = ModelBundle {
            config,
            params,
            ae,
            hyper,
            text,
            global_proj,
            denoiser,
            codebook,
            pq: None,
            schedule,
        };
        bundle.apply_trainable();
        Ok(bundle)
    }

    /// Mark the configured trainable subset. Autoencoder weights are always frozen.
    pub fn apply_trainable(&mut self) {
        let linear: std::collections::HashSet<String> = self
            .denoiser
            .linear_params()
            .into_iter()
            .map(|id| self.params.get(id).name.clone())
            .collect();
        let ext = self.denoiser.extension_param().map(|id| self.params.get(id).name.clone());
        let subset = self.config.trainable;
        self.params.set_trainable(|n| {
            if n.starts_with("ae.") {
                return false;
            }
            match subset {
                TrainableSubset::All => true,
                TrainableSubset::LinearOnly => !n.starts_with("den.") || linear.contains(n) || ext.as_deref() == Some(n),
            }
        });
    }

    pub fn cast<U: Elem>(&self) -> ModelBundle<U> {
        let cb = &self.codebook;
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap())).collect::<Vec<U>>();
        ModelBundle {
            config: self.config.clone(),
            params: self.params.cast(),
            ae: self.ae.clone(),
            hyper: self.hyper.clone(),
            text: self.text.clone(),
            global_proj: self.global_proj.clone(),
            denoiser: self.denoiser.clone(),
            codebook: Codebook {
                size: cb.size,
                dim: cb.dim,
                codes: conv(&cb.codes),
                ema_count: conv(&cb.ema_count),
                ema_sum: conv(&cb.ema_sum),
                gamma: cb.gamma,
                epsilon: cb.epsilon,
            },
            pq: self.pq.clone(),
            schedule: self.schedule.clone(),
        }
    }

    /// Images in `[0, 1]` (`[B, 3, R, R]`) to the diffusion space.
    pub fn to_latent(&self, s: &Session<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let x = images.scale(T::from_f64_lossy(2.0)).add_scalar(-T::one());
        match &self.ae {
            Some(ae) => ae.encode(s, &x),
            None => Ok(x),
        }
    }

    /// Diffusion space back to images clamped to `[0, 1]`.
    pub fn from_latent(&self, s: &Session<T>, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let x = match &self.ae {
            Some(ae) => ae.decode(s, latent)?,
            None => latent.clone(),
        };
        let half = T::from_f64_lossy(0.5);
        let out = x.data().iter().map(|&v| ((v + T::one()) * half).max(T::zero()).min(T::one())).collect();
        Ok(Tensor::new(x.shape(), out)?)
    }

    /// Global token sequence `[B, L, E]`.
    pub fn context(&self, s: &Session<T>, input: &GlobalInput) -> Result<Tensor<T>> {
        match input {
            GlobalInput::Null(b) => self.text.null_batch(s, *b),
            GlobalInput::Text(ids) => self.text.embed_ids(s, ids),
            GlobalInput::Pq(es) => {
                let proj = match &self.global_proj {
                    Some(p) => p,
                    None => return mismatch("bundle has no global-embedding projection"),
                };
                let parts = es
                    .iter()
                    .map(|e| match e {
                        Some(e) => {
                            let x = Tensor::new(&[1, 1, e.len()], e.iter().map(|&v| T::from_f32(v).unwrap()).collect())?;
                            let tok = proj.forward(s, &x)?;
                            // repeat the single token so every batch entry has the same length
                            let rep = Tensor::zeros(&[1, self.config.max_tokens, self.config.text_dim]);
                            Ok(rep.add_broadcast(&tok)?)
                        }
                        None => self.text.null_batch(s, 1),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Tensor<T>> = parts.iter().collect();
                Ok(perco_tensor::concat(&refs, 0)?)
            }
        }
    }

    fn records(&self) -> Vec<Record> {
        let f = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap()).collect::<Vec<f32>>();
        let cb = &self.codebook;
        let mut recs = self.params.to_records();
        recs.push(Record {
            name: "codebook.codes".into(),
            shape: vec![cb.size, cb.dim],
            data: f(&cb.codes),
        });
        recs.push(Record {
            name: "codebook.ema_count".into(),
            shape: vec![cb.size],
            data: f(&cb.ema_count),
        });
        recs.push(Record {
            name: "codebook.ema_sum".into(),
            shape: vec![cb.size, cb.dim],
            data: f(&cb.ema_sum),
        });
        if let Some(pq) = &self.pq {
            recs.push(Record {
                name: "pq.codebooks".into(),
                shape: vec![pq.m, pq.size, pq.sub_dim],
                data: pq.codebooks.clone(),
            });
        }
        recs
    }

    /// Checkpoint bytes (`PCKP`) for parameters, codebook and PQ tables.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_records(&mut buf, &self.records())?;
        Ok(buf)
    }

    /// Write `config.txt` and `params.pckp` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_text())?;
        fs::write(dir.join(PARAMS_FILE), self.checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = ModelConfig::parse(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let bytes = fs::read(dir.join(PARAMS_FILE))?;
        Self::from_checkpoint(config, &bytes)
    }

    pub fn from_checkpoint(config: ModelConfig, bytes: &[u8]) -> Result<Self> {
        let mut b = Self::new(config, 0)?;
        let records = read_records(bytes)?;
        let mut rest = Vec::new();
        let mut pq_tables = None;
        let mut cb_parts: [Option<Record>; 3] = [None, None, None];
        for r in records {
            match r.name.as_str() {
                "codebook.codes" => cb_parts[0] = Some(r),
                "codebook.ema_count" => cb_parts[1] = Some(r),
                "codebook.ema_sum" => cb_parts[2] = Some(r),
                "pq.codebooks" => pq_tables = Some(r),
                _ => rest.push(r),
            }
        }
        b.params.load_records(&rest).map_err(|e| crate::error::CodecError::Mismatch(e.to_string()))?;
        let [codes, count, sum] = cb_parts;
        let (codes, count, sum) = match (codes, count, sum) {
            (Some(a), Some(c), Some(s)) => (a, c, s),
            _ => return format_err("checkpoint", "codebook records missing"),
        };
        let (v, d) = (b.config.codebook_size, b.config.code_dim);
        if codes.shape != [v, d] || count.shape != [v] || sum.shape != [v, d] {
            return mismatch(format!("codebook {:?} does not match config V={v} dim={d}", codes.shape));
        }
        let t = |x: Vec<f32>| x.into_iter().map(|v| T::from_f32(v).unwrap()).collect::<Vec<T>>();
        b.codebook.codes = t(codes.data);
        b.codebook.ema_count = t(count.data);
        b.codebook.ema_sum = t(sum.data);
        if let Some(r) = pq_tables {
            match r.shape[..] {
                [m, size, sub_dim] => {
                    b.pq = Some(ProductQuantizer {
                        m,
                        size,
                        sub_dim,
                        codebooks: r.data,
                    })
                }
                _ => return format_err("checkpoint", "pq tables must be rank 3"),
            }
        }
        Ok(b)
    }

    /// Copy autoencoder weights from a separately trained store.
    pub fn load_autoencoder(&mut self, ae_params: &ParamStore<T>) -> Result<()> {
        if self.ae.is_none() {
            return mismatch("bundle has the autoencoder disabled");
        }
        for p in ae_params.iter().filter(|p| p.name.starts_with("ae.")) {
            let id = match self.params.id_of(&p.name) {
                Some(id) => id,
                None => return mismatch(format!("unexpected autoencoder parameter `{}`", p.name)),
            };
            let dst = self.params.get_mut(id);
            if dst.shape != p.shape {
                return mismatch(format!("`{}`: shape {:?} vs {:?}", p.name, p.shape, dst.shape));
            }
            dst.data.clone_from(&p.data);
        }
        Ok(())
    }

    /// Number of spatial indices per image.
    pub fn grid_cells(&self) -> usize {
        self.config.grid_h * self.config.grid_w
    }
}

/// A bundle bound to one batch of conditions, usable by the sampler.
pub struct Conditioned<'a, T: Elem> {
    pub bundle: &'a ModelBundle<T>,
    pub session: &'a Session<T>,
    pub z_l: Option<Tensor<T>>,
    pub ctx: Tensor<T>,
    pub null_ctx: Tensor<T>,
}

impl<'a, T: Elem> Conditioned<'a, T> {
    pub fn new(bundle: &'a ModelBundle<T>, session: &'a Session<T>, z_l: Option<Tensor<T>>, global: &GlobalInput) -> Result<Self> {
        let ctx = bundle.context(session, global)?;
        let null_ctx = bundle.text.null_batch(session, global.len())?;
        let z_l = if bundle.config.local_cond { z_l } else { None };
        Ok(Conditioned {
            bundle,
            session,
            z_l,
            ctx,
            null_ctx,
        })
    }
}

impl<T: Elem> Denoise<T> for Conditioned<'_, T> {
    fn predict_v(&self, x_t: &Tensor<T>, t: usize, branch: Branch) -> Result<Tensor<T>> {
        let ts = vec![t; x_t.dim(0)];
        let zeros;
        let (z, ctx) = match branch {
            Branch::Conditional => (self.z_l.as_ref(), &self.ctx),
            Branch::NoText => (self.z_l.as_ref(), &self.null_ctx),
            Branch::Unconditional => {
                zeros = self.z_l.as_ref().map(|z| Tensor::zeros(z.shape()));
                (zeros.as_ref(), &self.null_ctx)
            }
        };
        self.bundle.denoiser.forward(self.session, x_t, &ts, z, ctx)
    }
}
