mod common;

use common::{f8, random_instance, scan_argmax};
use flashhead::quant::{centroid_logits_quant, quantize_matrix};
use flashhead::synth::unit_normal_queries;
use flashhead::{quantize_centroids, DecodeConfig, Error, FlashHead, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// |quantized logit − exact logit| against Σ_g (scale_g / 2)·‖h_g‖₁, with the
/// exact logit from f64 arithmetic and the bound from the stored scales.
fn check_bound(m: &Matrix, h: &[f32], bits: u8, group: usize) {
    let q = quantize_centroids(m, bits, group).unwrap();
    let got = centroid_logits_quant(&q, h).unwrap();
    for (r, &z) in got.iter().enumerate() {
        let exact: f64 = m
            .row(r)
            .iter()
            .zip(h)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let bound: f64 = (0..m.cols() / group)
            .map(|g| {
                let s = q.scales()[r * (m.cols() / group) + g] as f64;
                let l1: f64 = h[g * group..(g + 1) * group]
                    .iter()
                    .map(|x| x.abs() as f64)
                    .sum();
                s / 2.0 * l1
            })
            .sum();
        // slack for the f32 accumulation of the quantized dot itself
        let slack = 1e-5 * (1.0 + exact.abs());
        assert!(
            (z as f64 - exact).abs() <= bound + slack,
            "row {r}: {z} vs {exact}, bound {bound}"
        );
    }
}

#[test]
fn dequantization_error_within_half_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for bits in [4u8, 8] {
        let data: Vec<f32> = (0..64 * 32)
            .map(|_| rng.random_range(-2.0f32..2.0))
            .collect();
        let m = Matrix::new(64, 32, data).unwrap();
        let q = quantize_centroids(&m, bits, 16).unwrap();
        let dq = q.dequantize();
        for (i, (a, b)) in m.as_slice().iter().zip(dq.as_slice()).enumerate() {
            let s = q.scales()[i / 16];
            assert!((a - b).abs() <= s / 2.0 * (1.0 + 1e-5), "{a} {b} {s}");
        }
        assert_eq!(q.packed().len(), (64 * 32 * bits as usize).div_ceil(8));
        assert!(q.scales().iter().all(|&s| s > 0.0));
    }
}

#[test]
fn logit_error_bound_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..500 {
        let rows = rng.random_range(1..6);
        let group = [1usize, 2, 4, 8][trial % 4];
        let cols = group * rng.random_range(1..5);
        let scale = 10f32.powi(rng.random_range(-3..3));
        let m = Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0f32..1.0) * scale)
                .collect(),
        )
        .unwrap();
        let h: Vec<f32> = (0..cols).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        check_bound(&m, &h, if trial % 2 == 0 { 4 } else { 8 }, group);
    }
}

#[test]
fn stored_bound_matches_recomputed_bound() {
    let (_, index) = random_instance(256, 32, 16, 3);
    let q = quantize_centroids(index.centroids(), 4, 8).unwrap();
    let h: Vec<f32> = (0..32).map(|i| (i as f32 * 0.7).sin()).collect();
    let exact = index.centroids().matvec(&h);
    let got = q.logits(&h).unwrap();
    for ((g, x), b) in got.iter().zip(&exact).zip(q.logit_error_bound(&h)) {
        assert!(((g - x).abs() as f64) <= b + 1e-6);
    }
}

#[test]
fn f8_int4_keeps_top_probe() {
    let (e, index) = f8();
    let q = quantize_centroids(index.centroids(), 4, 2).unwrap();
    let exact = index.centroids().matvec(&[1.0, 0.0]);
    let quant = q.logits(&[1.0, 0.0]).unwrap();
    assert_eq!(scan_argmax(&quant), scan_argmax(&exact));
    let head = FlashHead::new(&index, &e)
        .unwrap()
        .with_quantized(&q)
        .unwrap();
    assert_eq!(
        head.decode(
            &[1.0, 0.0],
            &DecodeConfig::greedy(1),
            &mut ChaCha8Rng::seed_from_u64(0)
        )
        .unwrap(),
        0
    );
}

#[test]
fn full_probe_with_int4_stage1_matches_dense() {
    let (e, index) = random_instance(600, 32, 30, 5);
    let q = quantize_centroids(index.centroids(), 4, 16).unwrap();
    let head = FlashHead::new(&index, &e)
        .unwrap()
        .with_quantized(&q)
        .unwrap();
    let queries = unit_normal_queries(300, 32, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..queries.len() {
        let h = queries.query(i);
        assert_eq!(
            head.decode(h, &DecodeConfig::greedy(30), &mut rng).unwrap(),
            scan_argmax(&e.matvec(h))
        );
    }
}

#[test]
fn quantized_head_rejects_mismatched_shapes() {
    let (e, index) = random_instance(64, 8, 8, 1);
    let other = quantize_matrix(&e, 4, 8).unwrap();
    assert!(matches!(
        FlashHead::new(&index, &e).unwrap().with_quantized(&other),
        Err(Error::DimMismatch(_))
    ));
    let q = quantize_centroids(index.centroids(), 8, 8).unwrap();
    assert!(matches!(q.logits(&[0.0; 4]), Err(Error::DimMismatch(_))));
}

#[test]
fn from_parts_validates() {
    use flashhead::QuantizedCentroids;
    assert!(QuantizedCentroids::from_parts(4, 2, 1, 4, vec![1.0, 1.0], vec![0, 0]).is_ok());
    assert!(QuantizedCentroids::from_parts(4, 2, 1, 4, vec![1.0], vec![0, 0]).is_err());
    assert!(QuantizedCentroids::from_parts(4, 2, 1, 4, vec![1.0, 0.0], vec![0, 0]).is_err());
    assert!(QuantizedCentroids::from_parts(4, 2, 1, 4, vec![1.0, 1.0], vec![0]).is_err());
    assert!(QuantizedCentroids::from_parts(6, 2, 1, 4, vec![1.0, 1.0], vec![0, 0, 0]).is_err());
}
