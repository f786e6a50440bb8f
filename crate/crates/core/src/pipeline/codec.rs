//! End-to-end encoding to and decoding from `CompressedImage`.

use perco_tensor::{Rng, Tensor};

use super::image::Image;
use crate::bitstream::{caption_compress, caption_decompress, CompressedImage, GlobalKind, PqIndices};
use crate::diffusion::{ddim_sample_from, GuidanceConfig};
use crate::error::{invalid, mismatch, Result};
use crate::models::{Conditioned, GlobalCondition, GlobalInput, ModelBundle};
use crate::quantize::{bits_for, grid_vectors, lookup, vq_assign};

fn check_image(img: &Image, bundle: &ModelBundle<f32>) -> Result<()> {
    let s = bundle.config.image_size;
    if img.width != s || img.height != s {
        return mismatch(format!("image is {}×{}, model expects {s}×{s}", img.width, img.height));
    }
    Ok(())
}

/// Encode a batch of `(image, caption)` pairs. Deterministic.
pub fn encode_images(items: &[(&Image, &str)], bundle: &ModelBundle<f32>) -> Result<Vec<CompressedImage>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &bundle.config;
    let side = cfg.image_size;
    let mut data = Vec::with_capacity(items.len() * 3 * side * side);
    for (img, _) in items {
        check_image(img, bundle)?;
        data.extend_from_slice(&img.data);
    }
    let x = Tensor::new(&[items.len(), 3, side, side], data)?;
    let s = bundle.params.session(false);
    let cells = bundle.grid_cells();
    let indices: Vec<usize> = if cfg.local_cond {
        let h = bundle.hyper.forward(&s, &bundle.to_latent(&s, &x)?)?;
        grid_vectors(&h)?
            .chunks(cfg.code_dim)
            .map(|v| vq_assign(v, &bundle.codebook))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let pq_codes = if cfg.global == GlobalCondition::Pq {
        let pq = bundle.pq.as_ref().ok_or_else(|| crate::error::CodecError::Mismatch("model has no trained PQ tables".into()))?;
        let ae = bundle.ae.as_ref().expect("pq requires the autoencoder");
        let feats = ae.pooled_features(&s, &x.scale(2.0).add_scalar(-1.0))?;
        Some(
            feats
                .iter()
                .map(|f| pq.encode(&f.iter().map(|&v| v as f32).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let (gh, gw) = if cfg.local_cond { (cfg.grid_h, cfg.grid_w) } else { (0, 0) };
    items
        .iter()
        .enumerate()
        .map(|(i, (_, caption))| {
            let caption_bytes = if cfg.global == GlobalCondition::Text {
                caption_compress(caption)
            } else {
                Vec::new()
            };
            let ci = CompressedImage {
                width: side as u16,
                height: side as u16,
                grid_h: gh as u8,
                grid_w: gw as u8,
                log2v: bits_for(cfg.codebook_size) as u8,
                indices: if cfg.local_cond { indices[i * cells..(i + 1) * cells].to_vec() } else { Vec::new() },
                caption_bytes,
                pq: pq_codes.as_ref().map(|p| PqIndices {
                    log2v: bits_for(cfg.pq_size) as u8,
                    indices: p[i].clone(),
                }),
            };
            ci.validate()?;
            Ok(ci)
        })
        .collect()
}

pub fn encode_image(image: &Image, caption: &str, bundle: &ModelBundle<f32>) -> Result<CompressedImage> {
    Ok(encode_images(&[(image, caption)], bundle)?.remove(0))
}

/// Check that a stream was produced by a model with `bundle`'s configuration.
pub fn check_compatible(ci: &CompressedImage, bundle: &ModelBundle<f32>) -> Result<()> {
    ci.validate()?;
    let cfg = &bundle.config;
    if ci.width as usize != cfg.image_size || ci.height as usize != cfg.image_size {
        return mismatch(format!("stream is {}×{}, model decodes {}²", ci.width, ci.height, cfg.image_size));
    }
    let (gh, gw) = if cfg.local_cond { (cfg.grid_h, cfg.grid_w) } else { (0, 0) };
    if (ci.grid_h as usize, ci.grid_w as usize) != (gh, gw) {
        return mismatch(format!("stream grid {}×{}, model grid {gh}×{gw}", ci.grid_h, ci.grid_w));
    }
    if ci.log2v as usize != bits_for(cfg.codebook_size) {
        return mismatch(format!("stream codes use {} bits, model {}", ci.log2v, bits_for(cfg.codebook_size)));
    }
    if let Some(&bad) = ci.indices.iter().find(|&&i| i >= cfg.codebook_size) {
        return mismatch(format!("index {bad} outside the model codebook"));
    }
    match (ci.kind(), cfg.global) {
        (GlobalKind::None, _) | (GlobalKind::Text, GlobalCondition::Text) => Ok(()),
        (GlobalKind::Pq, GlobalCondition::Pq) => {
            let pq = ci.pq.as_ref().unwrap();
            match &bundle.pq {
                Some(t) if t.m == pq.indices.len() && bits_for(t.size) == pq.log2v as usize => Ok(()),
                _ => mismatch("PQ block does not match the model's PQ tables"),
            }
        }
        (kind, g) => mismatch(format!("stream carries {kind:?} global data, model is conditioned on {}", g.name())),
    }
}

fn global_entry(ci: &CompressedImage, bundle: &ModelBundle<f32>) -> Result<GlobalEntry> {
    Ok(match ci.kind() {
        GlobalKind::None => GlobalEntry::Null,
        GlobalKind::Text => {
            let caption = caption_decompress(&ci.caption_bytes)?;
            if caption.trim().is_empty() {
                GlobalEntry::Null
            } else {
                GlobalEntry::Text(bundle.text.tokens(&caption))
            }
        }
        GlobalKind::Pq => {
            let pq = bundle.pq.as_ref().unwrap();
            GlobalEntry::Pq(pq.decode(&ci.pq.as_ref().unwrap().indices)?)
        }
    })
}

enum GlobalEntry {
    Null,
    Text(Vec<usize>),
    Pq(Vec<f32>),
}

/// One decode job: a stream and the seed of its initial noise.
#[derive(Clone, Copy, Debug)]
pub struct DecodeJob<'a> {
    pub stream: &'a CompressedImage,
    pub seed: u64,
    pub sample: u64,
}

/// Initial noise for `(seed, sample)`.
pub fn initial_noise(seed: u64, sample: u64, n: usize) -> Vec<f32> {
    Rng::new(seed).fork(sample).normal_vec(n, 1.0)
}

/// Decode several streams in one batch. Every output depends only on its
/// own job, never on the other batch members.
pub fn decode_batch(jobs: &[DecodeJob<'_>], bundle: &ModelBundle<f32>, n_steps: usize, guidance: GuidanceConfig) -> Result<Vec<Image>> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &bundle.config;
    for j in jobs {
        check_compatible(j.stream, bundle)?;
    }
    let b = jobs.len();
    let s = bundle.params.session(false);
    let z_l = if cfg.local_cond {
        let idx: Vec<usize> = jobs.iter().flat_map(|j| j.stream.indices.iter().copied()).collect();
        Some(lookup(&bundle.codebook, &idx, b, cfg.grid_h, cfg.grid_w)?)
    } else {
        None
    };
    let entries = jobs.iter().map(|j| global_entry(j.stream, bundle)).collect::<Result<Vec<_>>>()?;
    let global = match cfg.global {
        GlobalCondition::Pq => GlobalInput::Pq(
            entries
                .into_iter()
                .map(|e| match e {
                    GlobalEntry::Pq(v) => Some(v),
                    _ => None,
                })
                .collect(),
        ),
        _ => GlobalInput::Text(
            entries
                .into_iter()
                .map(|e| match e {
                    GlobalEntry::Text(t) => Some(t),
                    _ => None,
                })
                .collect(),
        ),
    };
    let model = Conditioned::new(bundle, &s, z_l, &global)?;
    let (lc, side) = cfg.latent_shape();
    let per = lc * side * side;
    let noise: Vec<f32> = jobs.iter().flat_map(|j| initial_noise(j.seed, j.sample, per)).collect();
    let x_t = Tensor::new(&[b, lc, side, side], noise)?;
    let latent = ddim_sample_from(&model, x_t, n_steps, guidance, &bundle.schedule)?;
    if !latent.is_finite() {
        return Err(crate::error::CodecError::NonFinite("sampler produced non-finite values".into()));
    }
    let img = bundle.from_latent(&s, &latent)?;
    let plane = 3 * cfg.image_size * cfg.image_size;
    img.data()
        .chunks(plane)
        .map(|c| Image::new(cfg.image_size, cfg.image_size, c.to_vec()))
        .collect()
}

/// `k` reconstructions of one stream; sample `j` uses noise stream `j` of `seed`.
pub fn decode_samples(ci: &CompressedImage, bundle: &ModelBundle<f32>, n_steps: usize, seed: u64, guidance: GuidanceConfig, k: usize) -> Result<Vec<Image>> {
    if k == 0 {
        return invalid("at least one sample is required");
    }
    let jobs: Vec<DecodeJob<'_>> = (0..k as u64)
        .map(|sample| DecodeJob {
            stream: ci,
            seed,
            sample,
        })
        .collect();
    let mut out = Vec::with_capacity(k);
    for chunk in jobs.chunks(8) {
        out.extend(decode_batch(chunk, bundle, n_steps, guidance)?);
    }
    Ok(out)
}

pub fn decode_image(ci: &CompressedImage, bundle: &ModelBundle<f32>, n_steps: usize, seed: u64, guidance: GuidanceConfig) -> Result<Image> {
    Ok(decode_samples(ci, bundle, n_steps, seed, guidance, 1)?.remove(0))
}

/// The guidance stored in the model config.
pub fn model_guidance(bundle: &ModelBundle<f32>) -> GuidanceConfig {
    GuidanceConfig {
        lambda_s: bundle.config.lambda_s,
        mode: bundle.config.guidance,
    }
}
