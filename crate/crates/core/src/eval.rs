//! Distortion metrics, a Fréchet feature-statistics proxy, sample
//! diversity, and sweep/curve output.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use perco_tensor::{conv2d, Rng, Tensor};
use rayon::prelude::*;

use crate::bitstream::{bpp_total, bpp_with_header};
use crate::diffusion::{GuidanceConfig, GuidanceMode};
use crate::error::{invalid, mismatch, CodecError, Result};
use crate::models::ModelBundle;
use crate::pipeline::codec::{decode_batch, encode_images, DecodeJob};
use crate::pipeline::data::Sample;
use crate::pipeline::image::Image;

pub const PSNR_CAP: f64 = 100.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Worker pool sized by `PERCO_THREADS` (all cores when unset).
pub fn thread_pool() -> rayon::ThreadPool {
    let n = std::env::var("PERCO_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool")
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return mismatch(format!("{}×{} vs {}×{}", a.width, a.height, b.width, b.height));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    Ok(s / a.data.len() as f64)
}

/// `10·log10(1/MSE)`, capped for identical inputs.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// One channel plane, row-major.
#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    /// Separable valid-mode filtering.
    fn filter(&self, g: &[f64]) -> Plane {
        let k = g.len();
        let (ow, oh) = (self.w - k + 1, self.h - k + 1);
        let mut tmp = vec![0.0; self.h * ow];
        for y in 0..self.h {
            for x in 0..ow {
                tmp[y * ow + x] = (0..k).map(|i| g[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
            }
        }
        Plane { w: ow, h: oh, v: out }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// 2×2 average pooling; odd trailing rows/columns are averaged over
    /// the pixels present.
    fn pool(&self) -> Plane {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (yy, xx) = (2 * y + dy, 2 * x + dx);
                        if yy < self.h && xx < self.w {
                            s += self.v[yy * self.w + xx];
                            n += 1.0;
                        }
                    }
                }
                v[y * w + x] = s / n;
            }
        }
        Plane { w, h, v }
    }
}

fn planes(img: &Image) -> Vec<Plane> {
    let n = img.width * img.height;
    (0..3)
        .map(|c| Plane {
            w: img.width,
            h: img.height,
            v: img.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect(),
        })
        .collect()
}

/// Mean SSIM and mean contrast-structure term of one channel.
fn ssim_terms(x: &Plane, y: &Plane, g: &[f64]) -> (f64, f64) {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mx = x.filter(g);
    let my = y.filter(g);
    let sxx = x.zip(x, |a, b| a * b).filter(g);
    let syy = y.zip(y, |a, b| a * b).filter(g);
    let sxy = x.zip(y, |a, b| a * b).filter(g);
    let n = mx.v.len();
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..n {
        let (ux, uy) = (mx.v[i], my.v[i]);
        let vx = sxx.v[i] - ux * ux;
        let vy = syy.v[i] - uy * uy;
        let cov = sxy.v[i] - ux * uy;
        let l = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
        let c = (2.0 * cov + c2) / (vx + vy + c2);
        ssim += l * c;
        cs += c;
    }
    (ssim / n as f64, cs / n as f64)
}

/// Single-scale SSIM, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    if a.width.min(a.height) < SSIM_WINDOW {
        return invalid(format!("SSIM needs at least {SSIM_WINDOW} pixels per side"));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (pa, pb) = (planes(a), planes(b));
    Ok(pa.iter().zip(&pb).map(|(x, y)| ssim_terms(x, y, &g).0).sum::<f64>() / 3.0)
}

/// Scales usable for a given minimum side: the coarsest one still fits the window.
pub fn ms_ssim_scales(min_side: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len())
        .rev()
        .find(|&n| min_side >> (n - 1) >= SSIM_WINDOW)
        .unwrap_or(0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsSsim {
    pub value: f64,
    /// Scales actually used; fewer than five for small images.
    pub scales: usize,
}

/// Multi-scale SSIM with the standard scale weights, renormalised over the
/// scales that fit. Negative contrast terms clamp to zero.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<MsSsim> {
    same_shape(a, b)?;
    let scales = ms_ssim_scales(a.width.min(a.height));
    if scales == 0 {
        return invalid(format!("MS-SSIM needs at least {SSIM_WINDOW} pixels per side"));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|w| w / wsum).collect();
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for (mut x, mut y) in planes(a).into_iter().zip(planes(b)) {
        let mut v = 1.0;
        for (s, &w) in weights.iter().enumerate() {
            let (ss, cs) = ssim_terms(&x, &y, &g);
            let term = if s + 1 == scales { ss } else { cs };
            v *= term.max(0.0).powf(w);
            x = x.pool();
            y = y.pool();
        }
        total += v;
    }
    Ok(MsSsim {
        value: total / 3.0,
        scales,
    })
}

/// Mean over pairs of the RMS pixel distance.
pub fn diversity_stat(samples: &[Image]) -> Result<f64> {
    if samples.len() < 2 {
        return invalid("diversity needs at least two samples");
    }
    let mut s = 0.0;
    let mut n = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            s += mse(&samples[i], &samples[j])?.sqrt();
            n += 1;
        }
    }
    Ok(s / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// Mean and unbiased covariance of feature rows.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return invalid("feature statistics need at least two rows");
        }
        let f = rows[0].len();
        if rows.iter().any(|r| r.len() != f) {
            return mismatch("feature rows differ in length");
        }
        let n = rows.len();
        let mut mean = DVector::zeros(f);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(f, f);
        for r in rows {
            let d = DVector::from_column_slice(r) - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(FeatureStats { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues below
/// `−PSD_TOLERANCE` are an error, smaller negative ones clip to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    if let Some(&bad) = e.eigenvalues.iter().find(|&&l| l < -PSD_TOLERANCE) {
        return Err(CodecError::NonFinite(format!("matrix is not PSD: eigenvalue {bad:e}")));
    }
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, computed symmetrically as
/// `Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})` for the cross term.
pub fn frechet_proxy(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return mismatch(format!("feature dims {} vs {}", a.dim(), b.dim()));
    }
    let dm = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.cov)?;
    let cross = psd_sqrt(&(&sa * &b.cov * &sa))?.trace();
    let d = dm + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Seed-fixed random convolutional feature network, 3 → 64 channels,
/// mean-pooled.
#[derive(Clone, Debug)]
pub struct RandomConvFeatures {
    layers: Vec<(Tensor<f32>, Tensor<f32>)>,
}

pub const FEATURE_SEED: u64 = 0x5eed_fea7;

impl RandomConvFeatures {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let chans = [3usize, 16, 32, 64];
        let layers = chans
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let std = (2.0 / (9 * i) as f64).sqrt();
                let k = Tensor::new(&[o, i, 3, 3], rng.normal_vec(o * i * 9, std)).unwrap();
                let b = Tensor::new(&[o], rng.normal_vec(o, 0.1)).unwrap();
                (k, b)
            })
            .collect();
        RandomConvFeatures { layers }
    }

    pub fn features(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let (w, h) = (chunk[0].width, chunk[0].height);
            let mut data = Vec::with_capacity(chunk.len() * 3 * w * h);
            for im in chunk {
                if im.width != w || im.height != h {
                    return mismatch("feature batch mixes image sizes");
                }
                data.extend(im.data.iter().map(|v| 2.0 * v - 1.0));
            }
            let mut x = Tensor::new(&[chunk.len(), 3, h, w], data)?;
            for (k, b) in &self.layers {
                x = conv2d(&x, k, Some(b), 2, 1)?.silu();
            }
            out.extend(crate::models::ae::mean_pool(&x));
        }
        Ok(out)
    }
}

/// Feature network for the realism proxy: the frozen autoencoder encoder
/// when the model has one, otherwise a seed-fixed random conv net.
pub enum FeatureExtractor<'a> {
    Random(RandomConvFeatures),
    Autoencoder(&'a ModelBundle<f32>),
}

impl<'a> FeatureExtractor<'a> {
    pub fn for_bundle(bundle: &'a ModelBundle<f32>) -> Self {
        if bundle.ae.is_some() {
            FeatureExtractor::Autoencoder(bundle)
        } else {
            FeatureExtractor::Random(RandomConvFeatures::new(FEATURE_SEED))
        }
    }

    pub fn features(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        match self {
            FeatureExtractor::Random(r) => r.features(images),
            FeatureExtractor::Autoencoder(b) => {
                let ae = b.ae.as_ref().unwrap();
                let s = b.params.session(false);
                let mut out = Vec::new();
                for chunk in images.chunks(32) {
                    let (w, h) = (chunk[0].width, chunk[0].height);
                    let data: Vec<f32> = chunk.iter().flat_map(|im| im.data.iter().map(|v| 2.0 * v - 1.0)).collect();
                    let x = Tensor::new(&[chunk.len(), 3, h, w], data)?;
                    out.extend(ae.pooled_features(&s, &x)?);
                }
                Ok(out)
            }
        }
    }

    pub fn stats(&self, images: &[Image]) -> Result<FeatureStats> {
        FeatureStats::from_features(&self.features(images)?)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub n_steps: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    /// Decode seeds per image for the diversity statistic.
    pub diversity_samples: usize,
    /// Images (from the start of the eval set) that get diversity samples.
    pub diversity_images: usize,
    pub with_header: bool,
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_steps: 20,
            guidance: GuidanceConfig::default(),
            seed: 0,
            diversity_samples: 8,
            diversity_images: 8,
            with_header: false,
            batch: 16,
        }
    }
}

pub const NOT_COMPUTED: [&str; 4] = ["lpips", "kid", "clip_score", "miou"];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub guidance: GuidanceMode,
    pub n_steps: usize,
    pub bpp: f64,
    pub psnr: Vec<f64>,
    pub ms_ssim: Vec<f64>,
    pub ms_ssim_scales: usize,
    pub frechet: f64,
    /// Mean over the diversity images of the per-image statistic.
    pub diversity: f64,
    pub diversity_per_image: Vec<f64>,
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ms_ssim(&self) -> f64 {
        mean(&self.ms_ssim)
    }

    pub fn is_finite(&self) -> bool {
        self.psnr.iter().chain(&self.ms_ssim).all(|v| v.is_finite())
            && self.frechet.is_finite()
            && self.diversity.is_finite()
            && self.bpp.is_finite()
    }

    /// Human-readable summary with a note on scales and skipped metrics.
    pub fn summary(&self) -> String {
        format!(
            "{} [{} guidance, {} steps]: bpp {:.5} psnr {:.3} ms-ssim {:.4} ({} scales) frechet {:.4} diversity {:.4}; not computed: {}",
            self.label,
            self.guidance,
            self.n_steps,
            self.bpp,
            self.mean_psnr(),
            self.mean_ms_ssim(),
            self.ms_ssim_scales,
            self.frechet,
            self.diversity,
            NOT_COMPUTED.join(", ")
        )
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Encode, decode and score an evaluation set against reference feature
/// statistics (usually of the training corpus).
pub fn evaluate(bundle: &ModelBundle<f32>, label: &str, eval_set: &[Sample], reference: &FeatureStats, opts: &EvalOptions) -> Result<EvalReport> {
    if eval_set.len() < 2 {
        return invalid("evaluation needs at least two images");
    }
    let items: Vec<(&Image, &str)> = eval_set.iter().map(|s| (&s.image, s.caption.as_str())).collect();
    let streams = encode_images(&items, bundle)?;
    let bpps = streams
        .iter()
        .map(|ci| if opts.with_header { bpp_with_header(ci) } else { Ok(bpp_total(ci)) })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<DecodeJob<'_>> = streams
        .iter()
        .map(|ci| DecodeJob {
            stream: ci,
            seed: opts.seed,
            sample: 0,
        })
        .collect();
    let mut recon = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(opts.batch.max(1)) {
        recon.extend(decode_batch(chunk, bundle, opts.n_steps, opts.guidance)?);
    }
    let pool = thread_pool();
    let metrics: Vec<(f64, MsSsim)> = pool.install(|| {
        eval_set
            .par_iter()
            .zip(recon.par_iter())
            .map(|(s, r)| Ok((psnr(&s.image, r)?, ms_ssim(&s.image, r)?)))
            .collect::<Result<Vec<_>>>()
    })?;
    let extractor = FeatureExtractor::for_bundle(bundle);
    let frechet = frechet_proxy(&extractor.stats(&recon)?, reference)?;
    let mut diversity_per_image = Vec::new();
    if opts.diversity_samples >= 2 {
        for ci in streams.iter().take(opts.diversity_images) {
            let jobs: Vec<DecodeJob<'_>> = (0..opts.diversity_samples as u64)
                .map(|sample| DecodeJob {
                    stream: ci,
                    seed: opts.seed,
                    sample,
                })
                .collect();
            let mut samples = Vec::new();
            for chunk in jobs.chunks(opts.batch.max(1)) {
                samples.extend(decode_batch(chunk, bundle, opts.n_steps, opts.guidance)?);
            }
            diversity_per_image.push(diversity_stat(&samples)?);
        }
    }
    let report = EvalReport {
        label: label.to_string(),
        guidance: opts.guidance.mode,
        n_steps: opts.n_steps,
        bpp: mean(&bpps),
        psnr: metrics.iter().map(|m| m.0).collect(),
        ms_ssim: metrics.iter().map(|m| m.1.value).collect(),
        ms_ssim_scales: metrics[0].1.scales,
        frechet,
        diversity: if diversity_per_image.is_empty() { 0.0 } else { mean(&diversity_per_image) },
        diversity_per_image,
        config: bundle.config.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    };
    if !report.is_finite() {
        return Err(CodecError::NonFinite(format!("evaluation of {label} produced a non-finite metric")));
    }
    Ok(report)
}

/// One report per step count.
pub fn sweep_steps(
    bundle: &ModelBundle<f32>,
    label: &str,
    eval_set: &[Sample],
    reference: &FeatureStats,
    steps_list: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    steps_list
        .iter()
        .map(|&n| {
            let o = EvalOptions { n_steps: n, ..opts.clone() };
            evaluate(bundle, label, eval_set, reference, &o)
        })
        .collect()
}

pub const CURVE_METRICS: [&str; 4] = ["psnr", "ms_ssim", "frechet", "diversity"];
pub const CSV_HEADER: &str = "bpp,psnr,ms_ssim,frechet,diversity,label,guidance,steps";

fn metric(r: &EvalReport, name: &str) -> f64 {
    match name {
        "psnr" => r.mean_psnr(),
        "ms_ssim" => r.mean_ms_ssim(),
        "frechet" => r.frechet,
        _ => r.diversity,
    }
}

/// One row per report; floats are written in shortest round-trip form.
pub fn curves_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.bpp,
            r.mean_psnr(),
            r.mean_ms_ssim(),
            r.frechet,
            r.diversity,
            r.label.replace(',', ";"),
            r.guidance,
            r.n_steps
        )
        .unwrap();
    }
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of one metric against bpp: one `<path>` per label, points
/// sorted by bpp.
pub fn curves_svg(reports: &[EvalReport], metric_name: &str) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let xs: Vec<f64> = reports.iter().map(|r| r.bpp).collect();
    let ys: Vec<f64> = reports.iter().map(|r| metric(r, metric_name)).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut labels: Vec<&str> = Vec::new();
    for r in reports {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m,
        h - m
    )
    .unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">bpp</text>"#, w / 2.0, h - 12.0).unwrap();
    writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})">{}</text>"#, h / 2.0, h / 2.0, xml_escape(metric_name)).unwrap();
    for (li, label) in labels.iter().enumerate() {
        let mut pts: Vec<(f64, f64)> = reports
            .iter()
            .filter(|r| r.label == *label)
            .map(|r| (r.bpp, metric(r, metric_name)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, px(x), py(y)))
            .collect();
        let colour = PALETTE[li % PALETTE.len()];
        writeln!(s, r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="2"><title>{}</title></path>"#, d.join(" "), xml_escape(label)).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" font-size="11" fill="{colour}">{}</text>"#, w - m + 4.0, m + 14.0 * li as f64, xml_escape(label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Write `<dir>/<name>.csv` and `<dir>/curves_<metric>.svg` for every metric.
pub fn emit_curves(reports: &[EvalReport], dir: &Path, name: &str) -> Result<()> {
    if reports.is_empty() {
        return invalid("no reports to plot");
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{name}.csv")), curves_csv(reports))?;
    for m in CURVE_METRICS {
        std::fs::write(dir.join(format!("curves_{m}.svg")), curves_svg(reports, m))?;
    }
    Ok(())
}

/// Parse rows written by [`curves_csv`] back into partial reports
/// (per-image vectors hold the single mean value).
pub fn parse_curves_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(CodecError::Format {
            what: "curves CSV",
            detail: "unexpected header".into(),
        });
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || CodecError::Format {
                what: "curves CSV",
                detail: format!("bad row `{l}`"),
            };
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(EvalReport {
                label: f[5].to_string(),
                guidance: f[6].parse().map_err(|_| bad())?,
                n_steps: f[7].parse().map_err(|_| bad())?,
                bpp: num(0)?,
                psnr: vec![num(1)?],
                ms_ssim: vec![num(2)?],
                ms_ssim_scales: 0,
                frechet: num(3)?,
                diversity: num(4)?,
                diversity_per_image: Vec::new(),
                config: Vec::new(),
            })
        })
        .collect()
}
