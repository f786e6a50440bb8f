//! Autoencoder pretraining and codec training.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use log::{debug, info};
use perco_tensor::checkpoint::{read_records, write_records};
use perco_tensor::{conv2d, AdamW, AdamWConfig, ParamStore, Rng, Session, Tensor, TensorError};

use super::data::Sample;
use crate::diffusion::diffusion_loss;
use crate::error::{invalid, CodecError, Result};
use crate::models::{GlobalCondition, GlobalInput, ModelBundle, TinyAutoencoder};
use crate::quantize::{dead_code_reinit, ema_update, pq_train, vq_quantize_st, Codebook};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    /// Overrides the model config's drop probability when set.
    pub text_drop_p: Option<f64>,
    pub seed: u64,
    pub commit_weight: f64,
    pub dead_every: usize,
    pub dead_threshold: f64,
    /// Zero disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Weight of the optional `1 − SSIM(x̂0, x0)` term; 0 disables it.
    pub ssim_weight: f64,
    pub pq_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 16,
            lr: 1e-4,
            weight_decay: 0.01,
            warmup: 200,
            text_drop_p: None,
            seed: 0,
            commit_weight: 1.0,
            dead_every: 500,
            dead_threshold: 0.01,
            checkpoint_every: 0,
            checkpoint_dir: None,
            ssim_weight: 0.0,
            pq_iters: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return invalid("steps and batch must be positive");
        }
        if self.warmup > self.steps {
            return invalid(format!("warmup {} exceeds {} steps", self.warmup, self.steps));
        }
        if let Some(p) = self.text_drop_p {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("drop probability {p} outside [0, 1]"));
            }
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.commit_weight < 0.0 || self.ssim_weight < 0.0 {
            return invalid("lr must be positive; weights must be nonnegative");
        }
        Ok(())
    }

    /// Linear warmup to the peak rate, constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup", self.warmup.to_string()),
            ("text_drop_p", self.text_drop_p.map_or("model".into(), |p| p.to_string())),
            ("seed", self.seed.to_string()),
            ("commit_weight", self.commit_weight.to_string()),
            ("dead_every", self.dead_every.to_string()),
            ("dead_threshold", self.dead_threshold.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("ssim_weight", self.ssim_weight.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Diffusion term only.
    pub loss: f64,
    pub commit_loss: f64,
    /// Fraction of codes used by this batch.
    pub codebook_usage: f64,
    pub lr: f64,
    pub text_dropped: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    /// `(step, codes reset)` for every dead-code pass that reset anything.
    pub resets: Vec<(usize, usize)>,
    /// Codebook usage over the final 100 steps combined.
    pub final_usage: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,commit_loss,codebook_usage,lr\n");
        for r in &self.steps {
            writeln!(s, "{},{},{},{},{}", r.step, r.loss, r.commit_loss, r.codebook_usage, r.lr).unwrap();
        }
        s
    }

    pub fn drop_fraction(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().filter(|r| r.text_dropped).count() as f64 / self.steps.len() as f64
    }

    /// Mean diffusion loss over the `window` steps ending at `step` (1-based).
    pub fn moving_average(&self, step: usize, window: usize) -> Option<f64> {
        if step == 0 || step > self.steps.len() || window == 0 {
            return None;
        }
        let lo = step.saturating_sub(window);
        let xs = &self.steps[lo..step];
        Some(xs.iter().map(|r| r.loss).sum::<f64>() / xs.len() as f64)
    }
}

fn images_tensor(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let s = samples[0].image.width;
    let mut data = Vec::with_capacity(samples.len() * 3 * s * s);
    for x in samples {
        if x.image.width != s || x.image.height != s {
            return Err(CodecError::Mismatch("corpus images differ in size".into()));
        }
        data.extend_from_slice(&x.image.data);
    }
    Ok(Tensor::new(&[samples.len(), 3, s, s], data)?)
}

fn non_finite(step: usize, e: TensorError) -> CodecError {
    match e {
        TensorError::NonFiniteGradient { .. } => CodecError::NonFinite(format!("step {step}: {e}")),
        other => CodecError::Tensor(other),
    }
}

/// Diffusion-space tensors for the whole corpus, computed in chunks.
fn precompute_latents(bundle: &ModelBundle<f32>, corpus: &[Sample]) -> Result<Vec<Vec<f32>>> {
    let s = bundle.params.session(false);
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(32) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let lat = bundle.to_latent(&s, &images_tensor(&refs)?)?;
        let per = lat.numel() / chunk.len();
        out.extend(lat.data().chunks(per).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Pooled autoencoder features, one 64-vector per image.
pub fn autoencoder_features(bundle: &ModelBundle<f32>, corpus: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let ae = match &bundle.ae {
        Some(ae) => ae,
        None => return invalid("autoencoder features need ae_enabled"),
    };
    let s = bundle.params.session(false);
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(32) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = images_tensor(&refs)?;
        let x = x.scale(2.0).add_scalar(-1.0);
        out.extend(ae.pooled_features(&s, &x)?);
    }
    Ok(out)
}

fn stack(rows: &[&Vec<f32>], shape: [usize; 3]) -> Result<Tensor<f32>> {
    let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::new(&[rows.len(), shape[0], shape[1], shape[2]], data)?)
}

/// Epoch-wise shuffled batch order.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, rng: Rng) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        b.refill();
        b
    }

    fn refill(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Gaussian-window SSIM between two `[B, C, H, W]` tensors in `[0, 1]`,
/// differentiable in `x`. Valid convolution, 11-tap σ=1.5 window.
pub fn ssim_differentiable(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<Tensor<f32>> {
    let c = x.dim(1);
    let g = crate::eval::gaussian_window(11, 1.5);
    let mut k = vec![0.0f32; c * c * 121];
    for ci in 0..c {
        for (i, &gi) in g.iter().enumerate() {
            for (j, &gj) in g.iter().enumerate() {
                k[((ci * c + ci) * 11 + i) * 11 + j] = (gi * gj) as f32;
            }
        }
    }
    let k = Tensor::new(&[c, c, 11, 11], k)?;
    let blur = |t: &Tensor<f32>| conv2d(t, &k, None, 1, 0);
    let (c1, c2) = (0.01f32 * 0.01, 0.03f32 * 0.03);
    let mx = blur(x)?;
    let my = blur(y)?;
    let mxy = mx.mul(&my)?;
    let mx2 = mx.square();
    let my2 = my.square();
    let sx = blur(&x.square())?.sub(&mx2)?;
    let sy = blur(&y.square())?.sub(&my2)?;
    let sxy = blur(&x.mul(y)?)?.sub(&mxy)?;
    let num = mxy.scale(2.0).add_scalar(c1).mul(&sxy.scale(2.0).add_scalar(c2))?;
    let den = mx2.add(&my2)?.add_scalar(c1).mul(&sx.add(&sy)?.add_scalar(c2))?;
    Ok(num.mul(&den.recip())?.mean())
}

/// Trains the hyper-encoder, embedders, denoiser and codebook of `bundle`
/// on `corpus`. Autoencoder weights, if any, are never modified.
/// `progress` sees every step record as it is produced.
pub fn train_codec(bundle: &mut ModelBundle<f32>, corpus: &[Sample], cfg: &TrainConfig, mut progress: impl FnMut(&StepLog)) -> Result<TrainLog> {
    cfg.validate()?;
    if corpus.is_empty() {
        return invalid("empty training corpus");
    }
    let mc = bundle.config.clone();
    if corpus[0].image.width != mc.image_size || corpus[0].image.height != mc.image_size {
        return Err(CodecError::Mismatch(format!(
            "corpus is {}×{}, model expects {}",
            corpus[0].image.width, corpus[0].image.height, mc.image_size
        )));
    }
    let drop_p = cfg.text_drop_p.unwrap_or(mc.drop_p);
    let base = Rng::new(cfg.seed);
    let mut batcher = Batcher::new(corpus.len(), base.fork(1));
    let mut noise_rng = base.fork(2);
    let mut reinit_rng = base.fork(3);
    let mut init_rng = base.fork(4);
    let (lc, side) = mc.latent_shape();
    let lat_shape = [lc, side, side];

    info!("precomputing {} latents", corpus.len());
    let latents = precompute_latents(bundle, corpus)?;
    let globals: Vec<GlobalEntry> = match mc.global {
        GlobalCondition::None => corpus.iter().map(|_| GlobalEntry::Null).collect(),
        GlobalCondition::Text => corpus
            .iter()
            .map(|x| {
                if x.caption.trim().is_empty() {
                    GlobalEntry::Null
                } else {
                    GlobalEntry::Text(bundle.text.tokens(&x.caption))
                }
            })
            .collect(),
        GlobalCondition::Pq => {
            let feats = autoencoder_features(bundle, corpus)?;
            let flat: Vec<f32> = feats.iter().flatten().map(|&v| v as f32).collect();
            let pq = pq_train(&flat, crate::models::PQ_FEATURE_DIM, mc.pq_m, mc.pq_size, cfg.pq_iters, &mut init_rng)?;
            let g = feats
                .iter()
                .map(|f| {
                    let e: Vec<f32> = f.iter().map(|&v| v as f32).collect();
                    Ok(GlobalEntry::Pq(pq.decode(&pq.encode(&e)?)?))
                })
                .collect::<Result<Vec<_>>>()?;
            bundle.pq = Some(pq);
            g
        }
    };

    if mc.local_cond {
        bundle.codebook.check_size()?;
        let s = bundle.params.session(false);
        let cells = mc.grid_h * mc.grid_w;
        let mut vectors = Vec::new();
        let mut init_batches = Batcher::new(corpus.len(), base.fork(5));
        while vectors.len() < mc.codebook_size * mc.code_dim {
            let idx = init_batches.next(cfg.batch);
            let rows: Vec<&Vec<f32>> = idx.iter().map(|&i| &latents[i]).collect();
            let h = bundle.hyper.forward(&s, &stack(&rows, lat_shape)?)?;
            vectors.extend(crate::quantize::grid_vectors(&h)?);
            if vectors.len() >= corpus.len() * cells * mc.code_dim {
                break;
            }
        }
        bundle.codebook = Codebook::kmeans_pp(mc.codebook_size, mc.code_dim, &vectors, &mut init_rng)?;
    }

    let mut opt = AdamW::new(
        &bundle.params,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut log = TrainLog::default();
    let mut recent_codes: Vec<HashSet<usize>> = Vec::new();
    info!(
        "training {} steps, {} trainable of {} values",
        cfg.steps,
        bundle.params.num_trainable_values(),
        bundle.params.num_values()
    );
    for step in 0..cfg.steps {
        let idx = batcher.next(cfg.batch);
        let rows: Vec<&Vec<f32>> = idx.iter().map(|&i| &latents[i]).collect();
        let x0 = stack(&rows, lat_shape)?;
        let s = bundle.params.session(true);
        let quant = if mc.local_cond {
            let h = bundle.hyper.forward(&s, &x0)?;
            Some(vq_quantize_st(&h, &bundle.codebook)?)
        } else {
            None
        };
        let global = batch_global(&idx, &globals, mc.global);
        let mut pred_v = None;
        let sample = diffusion_loss(&x0, &bundle.schedule, &mut noise_rng, drop_p, |x_t, ts, dropped| {
            let ctx = if dropped {
                bundle.text.null_batch(&s, idx.len())?
            } else {
                bundle.context(&s, &global)?
            };
            let v = bundle.denoiser.forward(&s, x_t, ts, quant.as_ref().map(|q| &q.z), &ctx)?;
            pred_v = Some((x_t.clone(), v.clone()));
            Ok(v)
        })?;
        let diff_loss = sample.loss.item() as f64;
        let mut total = sample.loss.clone();
        let commit = match &quant {
            Some(q) => {
                total = total.add(&q.commit_loss.scale(cfg.commit_weight as f32))?;
                q.commit_loss.item() as f64
            }
            None => 0.0,
        };
        if cfg.ssim_weight > 0.0 {
            let (x_t, v) = pred_v.take().expect("predictor ran");
            let aux = ssim_aux(bundle, &s, &x0, &x_t, &v, &sample.timesteps)?;
            total = total.add(&aux.scale(cfg.ssim_weight as f32))?;
        }
        if !total.item().is_finite() {
            return Err(CodecError::NonFinite(format!(
                "step {step}: loss {diff_loss} commit {commit} at timesteps {:?}",
                sample.timesteps
            )));
        }
        total.backward()?;
        let grads = s.grads();
        drop(s);
        let lr = cfg.lr_at(step);
        opt.config.lr = lr;
        opt.step(&mut bundle.params, &grads).map_err(|e| non_finite(step, e))?;

        let mut usage = 0.0;
        if let Some(q) = &quant {
            ema_update(&mut bundle.codebook, &q.vectors, &q.indices)?;
            let used: HashSet<usize> = q.indices.iter().copied().collect();
            usage = used.len() as f64 / mc.codebook_size as f64;
            recent_codes.push(used);
            if recent_codes.len() > 100 {
                recent_codes.remove(0);
            }
            if cfg.dead_every > 0 && (step + 1) % cfg.dead_every == 0 {
                let n = dead_code_reinit(&mut bundle.codebook, &q.vectors, cfg.dead_threshold, &mut reinit_rng)?;
                if n > 0 {
                    debug!("step {}: reset {n} dead codes", step + 1);
                    log.resets.push((step + 1, n));
                }
            }
        }
        let rec = StepLog {
            step: step + 1,
            loss: diff_loss,
            commit_loss: commit,
            codebook_usage: usage,
            lr,
            text_dropped: sample.text_dropped,
        };
        progress(&rec);
        log.steps.push(rec);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                bundle.save(&dir.join(format!("step_{:06}", step + 1)))?;
            }
        }
    }
    let all: HashSet<usize> = recent_codes.iter().flatten().copied().collect();
    log.final_usage = all.len() as f64 / mc.codebook_size as f64;
    Ok(log)
}

#[derive(Clone, Debug)]
enum GlobalEntry {
    Null,
    Text(Vec<usize>),
    Pq(Vec<f32>),
}

fn batch_global(idx: &[usize], globals: &[GlobalEntry], kind: GlobalCondition) -> GlobalInput {
    match kind {
        GlobalCondition::None => GlobalInput::Null(idx.len()),
        GlobalCondition::Text => GlobalInput::Text(
            idx.iter()
                .map(|&i| match &globals[i] {
                    GlobalEntry::Text(t) => Some(t.clone()),
                    _ => None,
                })
                .collect(),
        ),
        GlobalCondition::Pq => GlobalInput::Pq(
            idx.iter()
                .map(|&i| match &globals[i] {
                    GlobalEntry::Pq(e) => Some(e.clone()),
                    _ => None,
                })
                .collect(),
        ),
    }
}

fn ssim_aux(bundle: &ModelBundle<f32>, s: &Session<f32>, x0: &Tensor<f32>, x_t: &Tensor<f32>, v: &Tensor<f32>, ts: &[usize]) -> Result<Tensor<f32>> {
    let b = x0.dim(0);
    let sched = &bundle.schedule;
    let ca: Vec<f32> = ts.iter().map(|&t| sched.sqrt_alpha_bar(t) as f32).collect();
    let cb: Vec<f32> = ts.iter().map(|&t| sched.sqrt_one_minus(t) as f32).collect();
    let ca = Tensor::new(&[b, 1, 1, 1], ca)?;
    let cb = Tensor::new(&[b, 1, 1, 1], cb)?;
    let x0_hat = x_t.mul_broadcast(&ca)?.sub(&v.mul_broadcast(&cb)?)?;
    let to_img = |z: &Tensor<f32>| -> Result<Tensor<f32>> {
        let x = match &bundle.ae {
            Some(ae) => ae.decode(s, z)?,
            None => z.clone(),
        };
        Ok(x.add_scalar(1.0).scale(0.5))
    };
    let sim = ssim_differentiable(&to_img(&x0_hat)?, &to_img(x0)?.stop_gradient())?;
    Ok(sim.neg().add_scalar(1.0))
}

#[derive(Clone, Debug)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub latent_channels: usize,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            steps: 1500,
            batch: 16,
            lr: 2e-3,
            seed: 0,
            latent_channels: 4,
        }
    }
}

/// A trained autoencoder with its own parameter store (`ae.*` names).
#[derive(Clone, Debug)]
pub struct PretrainedAe {
    pub params: ParamStore<f32>,
    pub ae: TinyAutoencoder,
    /// Pixel MSE per step.
    pub losses: Vec<f64>,
}

impl PretrainedAe {
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_records(&mut buf, &self.params.to_records())?;
        Ok(buf)
    }

    pub fn from_checkpoint(bytes: &[u8], latent_channels: usize) -> Result<Self> {
        let mut params = ParamStore::new();
        let ae = TinyAutoencoder::new(&mut params, latent_channels, &mut Rng::new(0))?;
        params
            .load_records(&read_records(bytes)?)
            .map_err(|e| CodecError::Mismatch(e.to_string()))?;
        Ok(PretrainedAe {
            params,
            ae,
            losses: Vec::new(),
        })
    }

    /// Image-to-image round trip through the autoencoder, clamped to `[0, 1]`.
    pub fn reconstruct(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = self.params.session(false);
        let x = images.scale(2.0).add_scalar(-1.0);
        let y = self.ae.decode(&s, &self.ae.encode(&s, &x)?)?;
        let out = y.data().iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
        Ok(Tensor::new(y.shape(), out)?)
    }
}

/// Pixel-MSE training of the autoencoder; afterwards the latent scale is
/// set to the standard deviation of the raw latents over the corpus.
pub fn pretrain_ae(corpus: &[Sample], cfg: &AeTrainConfig, mut progress: impl FnMut(usize, f64)) -> Result<PretrainedAe> {
    if corpus.is_empty() || cfg.steps == 0 || cfg.batch == 0 {
        return invalid("autoencoder pretraining needs a corpus, steps and a batch size");
    }
    let base = Rng::new(cfg.seed);
    let mut params = ParamStore::new();
    let ae = TinyAutoencoder::new(&mut params, cfg.latent_channels, &mut base.fork(7))?;
    params.set_trainable(|n| n != "ae.scale");
    let mut opt = AdamW::new(
        &params,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );
    let mut batcher = Batcher::new(corpus.len(), base.fork(1));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batcher.next(cfg.batch);
        let refs: Vec<&Sample> = idx.iter().map(|&i| &corpus[i]).collect();
        let x = images_tensor(&refs)?.scale(2.0).add_scalar(-1.0);
        let s = params.session(true);
        let y = ae.decode_raw(&s, &ae.encode_raw(&s, &x)?)?;
        let loss = y.mse(&x)?;
        let l = loss.item() as f64;
        if !l.is_finite() {
            return Err(CodecError::NonFinite(format!("autoencoder step {step}: loss {l}")));
        }
        loss.backward()?;
        let grads = s.grads();
        drop(s);
        // cosine decay to 5% of the peak rate
        let frac = step as f64 / cfg.steps as f64;
        opt.config.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        opt.step(&mut params, &grads).map_err(|e| non_finite(step, e))?;
        progress(step + 1, l);
        losses.push(l);
    }
    let s = params.session(false);
    let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
    for chunk in corpus.chunks(32) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = images_tensor(&refs)?.scale(2.0).add_scalar(-1.0);
        for &v in ae.encode_raw(&s, &x)?.data() {
            sum += v as f64;
            sq += (v as f64) * (v as f64);
            n += 1;
        }
    }
    drop(s);
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(1e-12).sqrt();
    params.get_mut(ae.scale).data[0] = std as f32;
    Ok(PretrainedAe { params, ae, losses })
}
