use perco_core::bitstream::{read_stream, write_stream, GlobalKind};
use perco_core::diffusion::{GuidanceConfig, GuidanceMode};
use perco_core::models::{GlobalCondition, ModelBundle, ModelConfig};
use perco_core::pipeline::codec::check_compatible;
use perco_core::pipeline::*;
use perco_core::CodecError;

fn corpus(count: usize, seed: u64) -> Vec<Sample> {
    generate_dataset(&ToyDatasetSpec { size: 16, count, seed })
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        steps: 10,
        batch: 4,
        lr: 1e-3,
        warmup: 2,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn trained_tiny(seed: u64) -> (ModelBundle<f32>, TrainLog) {
    let data = corpus(16, 3);
    let mut b = ModelBundle::new(ModelConfig::tiny(), seed).unwrap();
    let log = train_codec(&mut b, &data, &quick_train(), |_| {}).unwrap();
    (b, log)
}

#[test]
fn dataset_is_deterministic_and_in_range() {
    let a = generate_dataset(&ToyDatasetSpec::default());
    let b = generate_dataset(&ToyDatasetSpec::default());
    assert_eq!(a.len(), 512);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.caption, y.caption);
        assert_eq!(x.image, y.image);
        assert_eq!((x.image.width, x.image.height), (64, 64));
        assert!(x.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let words: Vec<&str> = x.caption.split(' ').collect();
        assert_eq!((words[0], words[3], words[4]), ("a", "on", "a"));
        assert!(data::COLORS.iter().any(|c| c.0 == words[1]) && data::COLORS.iter().any(|c| c.0 == words[5]));
        assert!(data::SHAPES.contains(&words[2]));
        assert_ne!(words[1], words[5]);
        assert_eq!(*words.last().unwrap(), "background");
    }
    let c = generate_dataset(&ToyDatasetSpec { seed: 1, ..ToyDatasetSpec::default() });
    assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    // a prefix of a larger corpus is the smaller corpus
    let small = generate_dataset(&ToyDatasetSpec { count: 10, ..ToyDatasetSpec::default() });
    assert!(small.iter().zip(&a).all(|(x, y)| x.image == y.image));
}

#[test]
fn ppm_files_round_trip() {
    let img = &corpus(1, 5)[0].image;
    let dir = std::env::temp_dir().join(format!("perco-ppm-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("x.ppm");
    write_ppm(img, &path).unwrap();
    let back = read_ppm(&path).unwrap();
    std::fs::write(dir.join("x.txt"), "a white square on a red background\n").unwrap();
    assert_eq!(caption_for(&path, None).unwrap(), "a white square on a red background");
    std::fs::remove_dir_all(&dir).ok();
    assert_eq!(back.to_bytes(), img.to_bytes());
    assert!(img.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
    assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0\n").is_err());
}

#[test]
fn encoding_is_deterministic_and_sized_by_the_config() {
    let b = ModelBundle::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    let data = corpus(3, 2);
    let items: Vec<(&Image, &str)> = data.iter().map(|s| (&s.image, s.caption.as_str())).collect();
    let x = encode_images(&items, &b).unwrap();
    let y = encode_images(&items, &b).unwrap();
    assert_eq!(x, y);
    for (i, ci) in x.iter().enumerate() {
        assert_eq!(*ci, encode_image(&data[i].image, &data[i].caption, &b).unwrap());
        assert_eq!(ci.indices.len(), 4);
        assert_eq!(ci.log2v, 6);
        assert_eq!(ci.kind(), GlobalKind::Text);
        assert_eq!(read_stream(&write_stream(ci).unwrap()).unwrap(), *ci);
    }
    let none = encode_image(&data[0].image, "", &b).unwrap();
    assert_eq!(none.kind(), GlobalKind::None);
    assert_eq!(none.indices, x[0].indices);
    let wrong = Image::filled(32, 32, [0.5; 3]);
    assert!(matches!(encode_image(&wrong, "", &b), Err(CodecError::Mismatch(_))));
}

#[test]
fn decoding_is_deterministic_and_batch_invariant() {
    let (b, _) = trained_tiny(0);
    let data = corpus(3, 9);
    let streams: Vec<_> = data.iter().map(|s| encode_image(&s.image, &s.caption, &b).unwrap()).collect();
    let g = model_guidance(&b);
    let one = decode_image(&streams[0], &b, 5, 42, g).unwrap();
    assert_eq!(one, decode_image(&streams[0], &b, 5, 42, g).unwrap());
    assert_ne!(one, decode_image(&streams[0], &b, 5, 43, g).unwrap());
    assert!(one.data.iter().all(|v| (0.0..=1.0).contains(v)));
    let jobs: Vec<DecodeJob> = streams
        .iter()
        .enumerate()
        .map(|(i, s)| DecodeJob { stream: s, seed: 42, sample: i as u64 % 2 })
        .collect();
    let batched = decode_batch(&jobs, &b, 5, g).unwrap();
    for (job, img) in jobs.iter().zip(&batched) {
        let alone = decode_batch(std::slice::from_ref(job), &b, 5, g).unwrap().remove(0);
        let bits = |i: &Image| i.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(img), bits(&alone));
    }
    let samples = decode_samples(&streams[1], &b, 5, 42, g, 3).unwrap();
    assert_eq!(samples.len(), 3);
    assert_eq!(samples[0], decode_image(&streams[1], &b, 5, 42, g).unwrap());
    assert_ne!(samples[0], samples[1]);
}

#[test]
fn every_guidance_mode_decodes() {
    let (b, _) = trained_tiny(0);
    let s = &corpus(1, 4)[0];
    let ci = encode_image(&s.image, &s.caption, &b).unwrap();
    for mode in GuidanceMode::ALL {
        let img = decode_image(&ci, &b, 3, 0, GuidanceConfig { lambda_s: 3.0, mode }).unwrap();
        assert!(img.data.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn incompatible_streams_are_a_mismatch() {
    let b = ModelBundle::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    let s = &corpus(1, 4)[0];
    let good = encode_image(&s.image, &s.caption, &b).unwrap();
    let g = model_guidance(&b);
    let mut grid = good.clone();
    grid.grid_h = 1;
    grid.grid_w = 1;
    grid.indices.truncate(1);
    let mut bits = good.clone();
    bits.log2v = 8;
    let mut size = good.clone();
    size.width = 32;
    for bad in [grid, bits, size] {
        assert!(matches!(check_compatible(&bad, &b), Err(CodecError::Mismatch(_))));
        assert!(matches!(decode_image(&bad, &b, 2, 0, g), Err(CodecError::Mismatch(_))));
    }
    let other = ModelBundle::<f32>::new(
        ModelConfig {
            global: GlobalCondition::None,
            ..ModelConfig::tiny()
        },
        1,
    )
    .unwrap();
    assert!(matches!(check_compatible(&good, &other), Err(CodecError::Mismatch(_))));
}

#[test]
fn training_is_reproducible_from_its_seed() {
    let (a, log_a) = trained_tiny(0);
    let (b, log_b) = trained_tiny(0);
    assert_eq!(a.checkpoint_bytes().unwrap(), b.checkpoint_bytes().unwrap());
    assert_eq!(log_a.steps, log_b.steps);
    assert_eq!(log_a.steps.len(), 10);
    let csv = log_a.to_csv();
    assert_eq!(csv.lines().next(), Some("step,loss,commit_loss,codebook_usage,lr"));
    assert_eq!(csv.lines().count(), 11);
    assert!(log_a.steps.iter().all(|r| r.loss.is_finite() && r.lr > 0.0));
    let mut c = ModelBundle::new(ModelConfig::tiny(), 0).unwrap();
    let cfg = TrainConfig { seed: 8, ..quick_train() };
    train_codec(&mut c, &corpus(16, 3), &cfg, |_| {}).unwrap();
    assert_ne!(a.checkpoint_bytes().unwrap(), c.checkpoint_bytes().unwrap());
}

#[test]
fn intermediate_checkpoints_are_written() {
    let dir = std::env::temp_dir().join(format!("perco-ckpt-{}", std::process::id()));
    let mut b = ModelBundle::new(ModelConfig::tiny(), 0).unwrap();
    let cfg = TrainConfig {
        steps: 4,
        checkpoint_every: 2,
        checkpoint_dir: Some(dir.clone()),
        ..quick_train()
    };
    let mut seen = Vec::new();
    train_codec(&mut b, &corpus(8, 3), &cfg, |r| seen.push(r.step)).unwrap();
    assert_eq!(seen, [1, 2, 3, 4]);
    let last = ModelBundle::<f32>::load(&dir.join("step_000004")).unwrap();
    assert!(dir.join("step_000002").join("params.pckp").exists());
    std::fs::remove_dir_all(&dir).ok();
    assert_eq!(last.checkpoint_bytes().unwrap(), b.checkpoint_bytes().unwrap());
}

#[test]
fn non_finite_parameters_abort_training() {
    let mut b = ModelBundle::new(ModelConfig::tiny(), 0).unwrap();
    let id = b.params.id_of("den.in.w_base").unwrap();
    b.params.get_mut(id).data[0] = f32::NAN;
    let err = train_codec(&mut b, &corpus(8, 3), &quick_train(), |_| {}).unwrap_err();
    assert!(matches!(err, CodecError::NonFinite(_)), "{err}");
}

#[test]
fn autoencoder_pretraining_reduces_pixel_error() {
    let data = generate_dataset(&ToyDatasetSpec { size: 32, count: 32, seed: 0 });
    let cfg = AeTrainConfig {
        steps: 60,
        batch: 8,
        ..AeTrainConfig::default()
    };
    let ae = pretrain_ae(&data, &cfg, |_, _| {}).unwrap();
    let first: f64 = ae.losses[..5].iter().sum::<f64>() / 5.0;
    let last: f64 = ae.losses[55..].iter().sum::<f64>() / 5.0;
    assert!(last < 0.5 * first, "{first} -> {last}");
    let again = PretrainedAe::from_checkpoint(&ae.checkpoint_bytes().unwrap(), 4).unwrap();
    assert_eq!(again.checkpoint_bytes().unwrap(), ae.checkpoint_bytes().unwrap());
}
