use perco_core::quantize::*;
use perco_tensor::{Rng, Tensor};
use proptest::prelude::*;

fn random_codebook(rng: &mut Rng, size: usize, dim: usize) -> Codebook<f64> {
    Codebook::from_codes(dim, rng.normal_vec(size * dim, 1.0)).unwrap()
}

fn brute_force_nearest(h: &[f64], cb: &Codebook<f64>) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for i in 0..cb.size {
        let mut d = 0.0;
        for k in 0..cb.dim {
            d += (h[k] - cb.codes[i * cb.dim + k]).powi(2);
        }
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

#[test]
fn assignment_matches_exhaustive_scan() {
    let mut rng = Rng::new(1);
    let cb = random_codebook(&mut rng, 256, 32);
    for _ in 0..500 {
        let h: Vec<f64> = rng.normal_vec(32, 1.2);
        assert_eq!(vq_assign(&h, &cb).unwrap(), brute_force_nearest(&h, &cb));
    }
}

#[test]
fn code_rows_are_a_fixed_point() {
    let mut rng = Rng::new(2);
    let cb = random_codebook(&mut rng, 64, 4);
    let picks = [3usize, 17, 63, 0, 9, 9, 40, 41];
    let h = lookup(&cb, &picks, 2, 2, 2).unwrap();
    let q = vq_quantize_st(&h, &cb).unwrap();
    assert_eq!(q.indices, picks);
    assert_eq!(q.z.data(), h.data());
    assert_eq!(q.commit_loss.item(), 0.0);
}

#[test]
fn straight_through_gradient_is_all_ones() {
    let mut rng = Rng::new(3);
    let cb = random_codebook(&mut rng, 64, 4);
    let h = Tensor::leaf(&[2, 4, 3, 3], rng.normal_vec(72, 1.0)).unwrap();
    let q = vq_quantize_st(&h, &cb).unwrap();
    q.z.sum().backward().unwrap();
    assert!(h.grad().unwrap().iter().all(|&g| g == 1.0));
    for (cell, &i) in q.indices.iter().enumerate() {
        let (b, p) = (cell / 9, cell % 9);
        for c in 0..4 {
            assert_eq!(q.z.data()[(b * 4 + c) * 9 + p], cb.code(i)[c]);
        }
    }
}

#[test]
fn commitment_loss_matches_an_independent_loop() {
    let mut rng = Rng::new(4);
    let cb = random_codebook(&mut rng, 128, 8);
    let (b, c, g) = (3, 8, 4);
    let data: Vec<f64> = rng.normal_vec(b * c * g * g, 1.0);
    let h = Tensor::leaf(&[b, c, g, g], data.clone()).unwrap();
    let q = vq_quantize_st(&h, &cb).unwrap();
    let mut total = 0.0;
    for bi in 0..b {
        for y in 0..g {
            for x in 0..g {
                let v: Vec<f64> = (0..c).map(|ci| data[((bi * c + ci) * g + y) * g + x]).collect();
                let k = brute_force_nearest(&v, &cb);
                total += (0..c).map(|ci| (v[ci] - cb.code(k)[ci]).powi(2)).sum::<f64>();
            }
        }
    }
    let expect = total / (b * g * g) as f64;
    assert!((q.commit_loss.item() - expect).abs() < 1e-12);
    // the commitment gradient pulls h towards its code: 2(h − z_q)/cells
    q.commit_loss.backward().unwrap();
    let grad = h.grad().unwrap();
    for (i, (&gv, (&hv, &zv))) in grad.iter().zip(data.iter().zip(q.z.data())).enumerate() {
        assert!((gv - 2.0 * (hv - zv) / (b * g * g) as f64).abs() < 1e-12, "coordinate {i}");
    }
}

#[test]
fn quantization_is_idempotent() {
    let mut rng = Rng::new(5);
    let cb = random_codebook(&mut rng, 256, 32);
    let h = Tensor::new(&[2, 32, 4, 4], rng.normal_vec(1024, 1.0)).unwrap();
    let q1 = vq_quantize_st(&h, &cb).unwrap();
    let q2 = vq_quantize_st(&q1.z.stop_gradient(), &cb).unwrap();
    assert_eq!(q1.indices, q2.indices);
    assert_eq!(q2.commit_loss.item(), 0.0);
}

#[test]
fn ema_converges_to_cluster_means() {
    let mut rng = Rng::new(6);
    let (size, dim) = (64, 8);
    let mut cb = random_codebook(&mut rng, size, dim);
    cb.gamma = 0.99;
    let indices: Vec<usize> = (0..256).map(|i| i % size).collect();
    let vectors: Vec<f64> = rng.normal_vec(256 * dim, 2.0).iter().map(|v: &f64| v + 3.0).collect();
    let mut means = vec![0.0; size * dim];
    for (v, &i) in vectors.chunks(dim).zip(&indices) {
        for k in 0..dim {
            means[i * dim + k] += v[k] / 4.0;
        }
    }
    for _ in 0..1000 {
        ema_update(&mut cb, &vectors, &indices).unwrap();
        assert!(cb.ema_count.iter().all(|&c| c >= 0.0));
    }
    for (c, m) in cb.codes.iter().zip(&means) {
        assert!((c - m).abs() < 1e-3, "code {c} vs mean {m}");
    }
}

#[test]
fn unassigned_codes_only_drift_by_the_smoothing_term() {
    let mut rng = Rng::new(7);
    let mut cb = random_codebook(&mut rng, 64, 4);
    let before = cb.code(10).to_vec();
    let vectors: Vec<f64> = rng.normal_vec(8, 1.0);
    for _ in 0..100 {
        ema_update(&mut cb, &vectors, &[0, 1]).unwrap();
    }
    for (a, b) in cb.code(10).iter().zip(&before) {
        assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn total_count_is_conserved_without_decay_memory() {
    let mut rng = Rng::new(8);
    let mut cb = random_codebook(&mut rng, 64, 2);
    cb.gamma = 1.0;
    let start: f64 = cb.ema_count.iter().sum();
    let vectors: Vec<f64> = rng.normal_vec(20, 1.0);
    ema_update(&mut cb, &vectors, &[0, 5, 5, 7, 63, 1, 2, 3, 4, 9]).unwrap();
    assert_eq!(cb.ema_count.iter().sum::<f64>(), start);
}

#[test]
fn dead_code_reinit_cases() {
    let mut rng = Rng::new(9);
    let mut cb = random_codebook(&mut rng, 64, 3);
    let snapshot = cb.clone();
    let batch: Vec<f64> = rng.normal_vec(64 * 3, 1.0);
    assert_eq!(dead_code_reinit(&mut cb, &batch, 0.01, &mut rng).unwrap(), 0);
    assert_eq!(cb, snapshot);

    cb.ema_count = vec![0.0; 64];
    assert_eq!(dead_code_reinit(&mut cb, &batch, 0.01, &mut rng).unwrap(), 64);
    let mut got: Vec<Vec<u64>> = cb.codes.chunks(3).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    let mut want: Vec<Vec<u64>> = batch.chunks(3).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    got.sort();
    want.sort();
    assert_eq!(got, want);
    let mut hist = vec![0usize; 64];
    for v in batch.chunks(3) {
        hist[vq_assign(v, &cb).unwrap()] += 1;
    }
    assert!(hist.iter().all(|&n| n > 0));

    // fewer vectors than dead codes: reuse with replacement
    cb.ema_count = vec![0.0; 64];
    assert_eq!(dead_code_reinit(&mut cb, &batch[..6], 0.01, &mut rng).unwrap(), 64);
    assert!(cb.codes.chunks(3).all(|r| r == &batch[..3] || r == &batch[3..6]));

    let mut a = snapshot.clone();
    let mut b = snapshot.clone();
    a.ema_count[4] = 0.0;
    b.ema_count[4] = 0.0;
    dead_code_reinit(&mut a, &batch, 0.01, &mut Rng::new(1)).unwrap();
    dead_code_reinit(&mut b, &batch, 0.01, &mut Rng::new(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn codebook_floor_is_enforced() {
    let small = Codebook::from_codes(2, vec![0.0f32; 2 * 63]).unwrap();
    assert!(small.check_size().is_err());
    assert!(Codebook::from_codes(2, vec![0.0f32; 128]).unwrap().check_size().is_ok());
    assert!(Codebook::from_codes(2, vec![f32::NAN; 128]).is_err());
}

#[test]
fn pq_with_codebook_equal_to_data_is_lossless() {
    let mut rng = Rng::new(10);
    let (n, d) = (32, 6);
    let data: Vec<f32> = rng.normal_vec(n * d, 1.0);
    let pq = pq_train(&data, d, 1, n, 1, &mut rng).unwrap();
    for row in data.chunks(d) {
        assert_eq!(pq.decode(&pq.encode(row).unwrap()).unwrap(), row);
    }
    assert!(pq_train(&data, d, 1, n + 1, 1, &mut rng).is_err());
    assert!(pq_train(&data, d, 4, 8, 1, &mut rng).is_err());
}

#[test]
fn pq_rate_for_sixteen_subvectors() {
    let pq = ProductQuantizer {
        m: 16,
        size: 1024,
        sub_dim: 4,
        codebooks: vec![0.0; 16 * 1024 * 4],
    };
    assert_eq!(pq.bits(), 160);
    let bpp = pq.bits() as f64 / (512.0 * 512.0);
    assert!((bpp - 0.000_610_35).abs() < 5e-9);
    assert_eq!(format!("{bpp:.5}"), "0.00061");
}

fn sq(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn pq_encoding_is_locally_optimal() {
    let mut rng = Rng::new(11);
    let (n, d, m, v) = (400, 16, 4, 32);
    let data: Vec<f32> = rng.normal_vec(n * d, 1.0);
    let pq = pq_train(&data, d, m, v, 10, &mut rng).unwrap();
    let sd = d / m;
    for row in data.chunks(d).take(40) {
        let code = pq.encode(row).unwrap();
        assert!(code.iter().all(|&k| k < v));
        let err = sq(&pq.decode(&code).unwrap(), row);
        for j in 0..m {
            for k in 0..v {
                let mut alt = code.clone();
                alt[j] = k;
                assert!(err <= sq(&pq.decode(&alt).unwrap(), row) + 1e-5, "subspace {j} code {k}");
            }
        }
        assert_eq!(pq.encode(row).unwrap(), code);
        assert_eq!(pq.decode(&code).unwrap().len(), sd * m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_code_rows_quantize_losslessly(seed in any::<u64>(), picks in prop::collection::vec(0usize..64, 4)) {
        let mut rng = Rng::new(seed);
        let cb = random_codebook(&mut rng, 64, 5);
        let h = lookup(&cb, &picks, 1, 2, 2).unwrap();
        let q = vq_quantize_st(&h, &cb).unwrap();
        prop_assert_eq!(q.z.data(), h.data());
    }
}
