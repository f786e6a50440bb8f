use nalgebra::{DMatrix, DVector};
use perco_core::eval::*;
use perco_core::models::{ModelBundle, ModelConfig};
use perco_core::pipeline::{encode_image, generate_dataset, Image, ToyDatasetSpec};
use perco_core::bitstream::bpp_total;
use perco_tensor::Rng;

fn image(s: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
    let mut d = vec![0.0f32; 3 * s * s];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                d[(c * s + y) * s + x] = f(c, y, x) as f32;
            }
        }
    }
    Image::new(s, s, d).unwrap()
}

fn binary_pattern() -> Image {
    image(64, |c, y, x| if ((x / 4) * 7 + (y / 4) * 3 + c) % 5 < 2 { 1.0 } else { 0.0 })
}

fn smooth_pair() -> (Image, Image) {
    let g = |c: usize, y: usize, x: usize| (x + y + 10 * c) as f64 / 160.0;
    let a = image(64, g);
    let b = image(64, |c, y, x| (g(c, y, x) + 0.1 * (0.7 * y as f64 + 1.3 * x as f64 + c as f64).sin()).clamp(0.0, 1.0));
    (a, b)
}

fn invert(img: &Image) -> Image {
    Image::new(img.width, img.height, img.data.iter().map(|v| 1.0 - v).collect()).unwrap()
}

// Reference values from tf.image.ssim_multiscale / tf.image.ssim with the
// first three standard weights renormalised.
#[test]
fn ms_ssim_matches_reference_implementation() {
    let x = binary_pattern();
    let r = ms_ssim(&x, &invert(&x)).unwrap();
    assert_eq!(r.scales, 3);
    assert!(r.value.abs() < 1e-4, "{}", r.value);
    let (a, b) = smooth_pair();
    let r = ms_ssim(&a, &b).unwrap();
    assert!((r.value - 0.616_691_887_378_692_6).abs() < 1e-4, "{}", r.value);
    assert!((ssim(&a, &b).unwrap() - 0.198_844_671_249_389_65).abs() < 1e-4);
}

#[test]
fn ms_ssim_falls_as_noise_grows() {
    let (a, _) = smooth_pair();
    let mut rng = Rng::new(1);
    let base: Vec<f64> = rng.normal_vec(a.data.len(), 1.0);
    let mut last = ms_ssim(&a, &a).unwrap().value;
    assert!((last - 1.0).abs() < 1e-12);
    for sigma in [0.01, 0.02, 0.05, 0.1, 0.2, 0.4] {
        let noisy = Image::new(64, 64, a.data.iter().zip(&base).map(|(v, n)| (*v as f64 + sigma * n).clamp(0.0, 1.0) as f32).collect()).unwrap();
        let v = ms_ssim(&a, &noisy).unwrap().value;
        assert!(v < last, "sigma {sigma}: {v} ≥ {last}");
        assert!((v - ms_ssim(&noisy, &a).unwrap().value).abs() < 1e-12);
        last = v;
    }
    assert!(ms_ssim(&Image::filled(8, 8, [0.0; 3]), &Image::filled(8, 8, [0.0; 3])).is_err());
}

#[test]
fn psnr_is_symmetric_and_capped() {
    let (a, b) = smooth_pair();
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert!(psnr(&a, &b).unwrap() < PSNR_CAP);
    assert!(psnr(&a, &Image::filled(8, 8, [0.0; 3])).is_err());
}

#[test]
fn diversity_is_order_invariant() {
    let imgs: Vec<Image> = (0..4).map(|k| image(8, |c, y, x| ((c + y * k + x) % 5) as f64 / 5.0)).collect();
    let mut rev = imgs.clone();
    rev.reverse();
    assert!((diversity_stat(&imgs).unwrap() - diversity_stat(&rev).unwrap()).abs() < 1e-12);
}

fn stats(mean: &[f64], cov: &[f64]) -> FeatureStats {
    let n = mean.len();
    FeatureStats {
        mean: DVector::from_column_slice(mean),
        cov: DMatrix::from_row_slice(n, n, cov),
        n: 100,
    }
}

#[test]
fn frechet_closed_forms() {
    let a = stats(&[0.0], &[1.0]);
    let b = stats(&[1.0], &[1.0]);
    assert!((frechet_proxy(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    assert!(frechet_proxy(&a, &a).unwrap().abs() < 1e-8);
    // 1-D: (μ₁−μ₂)² + (σ₁−σ₂)²
    let c = stats(&[0.5], &[4.0]);
    assert!((frechet_proxy(&a, &c).unwrap() - (0.25 + 1.0)).abs() < 1e-12);
    assert!(frechet_proxy(&a, &stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).is_err());
    assert!(frechet_proxy(&stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, -1.0]), &stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).is_err());
}

#[test]
fn frechet_is_symmetric_and_nonnegative_on_real_features() {
    let mut rng = Rng::new(2);
    let rows = |rng: &mut Rng, shift: f64| -> Vec<Vec<f64>> {
        (0..60).map(|_| (0..6).map(|k| rng.normal() * (1.0 + k as f64 * 0.3) + shift).collect()).collect()
    };
    let a = FeatureStats::from_features(&rows(&mut rng, 0.0)).unwrap();
    let b = FeatureStats::from_features(&rows(&mut rng, 0.4)).unwrap();
    let ab = frechet_proxy(&a, &b).unwrap();
    let ba = frechet_proxy(&b, &a).unwrap();
    assert!(ab > 0.0);
    assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
    assert!(frechet_proxy(&a, &a).unwrap() < 1e-8);
    let cov = &a.cov;
    assert!((cov - cov.transpose()).amax() < 1e-12);
    assert!(cov.clone().symmetric_eigen().eigenvalues.iter().all(|&l| l > -1e-8));
}

#[test]
fn random_features_separate_the_corpus_from_noise() {
    let data = generate_dataset(&ToyDatasetSpec { count: 128, ..ToyDatasetSpec::default() });
    let imgs: Vec<Image> = data.iter().map(|s| s.image.clone()).collect();
    let fx = RandomConvFeatures::new(FEATURE_SEED);
    let half_a = FeatureStats::from_features(&fx.features(&imgs[..64]).unwrap()).unwrap();
    let half_b = FeatureStats::from_features(&fx.features(&imgs[64..]).unwrap()).unwrap();
    let mut rng = Rng::new(3);
    let noise: Vec<Image> = (0..64).map(|_| Image::new(64, 64, (0..3 * 64 * 64).map(|_| rng.uniform() as f32).collect()).unwrap()).collect();
    let noise = FeatureStats::from_features(&fx.features(&noise).unwrap()).unwrap();
    let same = frechet_proxy(&half_a, &half_b).unwrap();
    let far = frechet_proxy(&half_a, &noise).unwrap();
    assert!(same < 0.1 * far, "{same} vs {far}");
    assert_eq!(fx.features(&imgs[..2]).unwrap(), fx.features(&imgs[..2]).unwrap());
}

fn report(label: &str, bpp: f64, psnr: f64) -> EvalReport {
    EvalReport {
        label: label.into(),
        guidance: perco_core::diffusion::GuidanceMode::TextOnly,
        n_steps: 20,
        bpp,
        psnr: vec![psnr],
        ms_ssim: vec![0.1 + bpp],
        ms_ssim_scales: 3,
        frechet: 1.0 / 3.0,
        diversity: 0.0123456789,
        diversity_per_image: vec![],
        config: vec![],
    }
}

/// Minimal tag-balance check: every opened element is closed in order.
fn well_formed(svg: &str) -> bool {
    let mut stack: Vec<String> = Vec::new();
    let mut rest = svg;
    while let Some(i) = rest.find('<') {
        let j = match rest[i..].find('>') {
            Some(j) => i + j,
            None => return false,
        };
        let tag = &rest[i + 1..j];
        rest = &rest[j + 1..];
        if tag.starts_with('?') || tag.ends_with('/') {
            continue;
        }
        if let Some(name) = tag.strip_prefix('/') {
            if stack.pop().as_deref() != Some(name.trim()) {
                return false;
            }
        } else {
            stack.push(tag.split_whitespace().next().unwrap_or("").to_string());
        }
    }
    stack.is_empty()
}

#[test]
fn curves_are_written_as_csv_and_svg() {
    let reports = vec![report("grid 2", 0.0014, 18.25), report("grid 4", 0.0059, 21.5), report("grid 8", 0.0234, 0.1 + 0.2)];
    let dir = std::env::temp_dir().join(format!("perco-curves-{}", std::process::id()));
    emit_curves(&reports, &dir, "toy").unwrap();
    let csv = std::fs::read_to_string(dir.join("toy.csv")).unwrap();
    let svgs: Vec<String> = CURVE_METRICS.iter().map(|m| std::fs::read_to_string(dir.join(format!("curves_{m}.svg"))).unwrap()).collect();
    std::fs::remove_dir_all(&dir).ok();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("bpp,psnr,ms_ssim,frechet,diversity"));
    let back = parse_curves_csv(&csv).unwrap();
    for (a, b) in back.iter().zip(&reports) {
        assert_eq!((a.bpp, a.mean_psnr(), a.mean_ms_ssim(), a.frechet, a.diversity), (b.bpp, b.mean_psnr(), b.mean_ms_ssim(), b.frechet, b.diversity));
        assert_eq!((&a.label, a.guidance, a.n_steps), (&b.label, b.guidance, b.n_steps));
    }
    for svg in &svgs {
        assert!(well_formed(svg));
        assert_eq!(svg.matches("<path ").count(), 3);
    }
    let one_series: Vec<EvalReport> = reports.iter().map(|r| EvalReport { label: "perco".into(), ..r.clone() }).collect();
    assert_eq!(curves_svg(&one_series, "psnr").matches("<path ").count(), 1);
    assert!(emit_curves(&[], &dir, "x").is_err());
    assert!(parse_curves_csv("nope\n1,2\n").is_err());
}

#[test]
fn evaluation_reports_match_the_bitstream_and_are_deterministic() {
    let bundle = ModelBundle::<f32>::new(ModelConfig::tiny(), 0).unwrap();
    let data = generate_dataset(&ToyDatasetSpec { size: 16, count: 6, seed: 4 });
    let imgs: Vec<Image> = data.iter().map(|s| s.image.clone()).collect();
    let reference = RandomConvFeatures::new(FEATURE_SEED);
    let reference = FeatureStats::from_features(&reference.features(&imgs).unwrap()).unwrap();
    let opts = EvalOptions {
        n_steps: 2,
        diversity_samples: 3,
        diversity_images: 2,
        ..EvalOptions::default()
    };
    let r = evaluate(&bundle, "tiny", &data, &reference, &opts).unwrap();
    assert!(r.is_finite());
    assert_eq!(r.psnr.len(), 6);
    assert_eq!(r.diversity_per_image.len(), 2);
    let bpp: f64 = data.iter().map(|s| bpp_total(&encode_image(&s.image, &s.caption, &bundle).unwrap())).sum::<f64>() / 6.0;
    assert!((r.bpp - bpp).abs() < 1e-12);
    assert_eq!(r, evaluate(&bundle, "tiny", &data, &reference, &opts).unwrap());
    assert!(r.summary().contains("not computed: lpips"));
    let swept = sweep_steps(&bundle, "tiny", &data, &reference, &[1, 2, 5], &opts).unwrap();
    assert_eq!(swept.iter().map(|r| r.n_steps).collect::<Vec<_>>(), [1, 2, 5]);
    assert_eq!(swept[1], r);
}
