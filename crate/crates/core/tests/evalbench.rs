mod common;

use std::sync::{Mutex, MutexGuard};

use common::{f8, random_instance};
use flashhead::evalbench::{
    ablation_balance, bench_pair, bench_tpot_head, containment, dense_head_oracle, greedy_decoder,
    label_queries, seed_robustness, sweep, DenseHead,
};
use flashhead::synth::{clustered_embeddings, hard_queries, unit_normal_queries};
use flashhead::{cost_model, ClusterOptions, DecodeConfig, FlashHead, HiddenBatch, Init, Matrix};

/// Every test holds this so timed sections never share the core.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn oracle_examples() {
    let _g = serial();
    let (e, _) = f8();
    assert_eq!(dense_head_oracle(&e, &[1.0, 0.0], 1).unwrap(), vec![0]);
    let mut all = dense_head_oracle(&e, &[0.3, 0.2], 8).unwrap();
    all.sort_unstable();
    assert_eq!(all, (0..8).collect::<Vec<u32>>());
    let id = Matrix::from_rows(
        &(0..5)
            .map(|i| {
                let mut r = [0.0f32; 5];
                r[i] = 1.0;
                r
            })
            .collect::<Vec<_>>(),
    )
    .unwrap();
    for j in 0..5 {
        let mut h = [0.0f32; 5];
        h[j] = 1.0;
        assert_eq!(dense_head_oracle(&id, &h, 1).unwrap(), vec![j as u32]);
    }
}

#[test]
fn full_probe_containment_is_one() {
    let _g = serial();
    let (e, index) = random_instance(512, 16, 16, 2);
    let q = unit_normal_queries(200, 16, 3);
    for k in [1, 3] {
        let r = containment(&index, &e, &q, &DecodeConfig::greedy(16), k).unwrap();
        assert_eq!((r.hits, r.n, r.fraction), (200, 200, 1.0));
        assert_eq!(
            (r.clusters, r.probes, r.mode, r.quant_bits),
            (16, 16, "greedy", None)
        );
    }
}

#[test]
fn dense_head_contains_itself_at_every_k() {
    let _g = serial();
    let e = clustered_embeddings(300, 8, 10, 0.5, 1);
    let q = unit_normal_queries(50, 8, 2);
    for k in 1..=5 {
        for i in 0..q.len() {
            let top = dense_head_oracle(&e, q.query(i), k).unwrap();
            let mut head = DenseHead::new(&e);
            assert!(top.contains(&head.argmax(q.query(i))));
        }
    }
}

#[test]
fn probe_sweep_is_monotone() {
    let _g = serial();
    let e = clustered_embeddings(2048, 16, 40, 0.7, 3);
    let (unit, _) = flashhead::normalize_rows_lossy(&e);
    let index = flashhead::spherical_kmeans(
        &unit,
        &ClusterOptions {
            max_iterations: 20,
            ..ClusterOptions::new(64)
        },
    )
    .unwrap();
    let mut q = hard_queries(&e, 300, 4.0, 9);
    label_queries(&e, &mut q, 1).unwrap();
    let fractions: Vec<f64> = [1, 2, 4, 8, 16, 32, 64]
        .iter()
        .map(|&p| {
            containment(&index, &e, &q, &DecodeConfig::greedy(p), 1)
                .unwrap()
                .fraction
        })
        .collect();
    assert!(fractions.windows(2).all(|w| w[0] <= w[1]), "{fractions:?}");
    assert_eq!(*fractions.last().unwrap(), 1.0);
}

#[test]
fn seed_robustness_edge_cases() {
    let _g = serial();
    let e = clustered_embeddings(64, 8, 4, 0.5, 5);
    let q = unit_normal_queries(40, 8, 1);
    let opts = ClusterOptions {
        max_iterations: 10,
        ..ClusterOptions::new(8)
    };
    let same = seed_robustness(&e, &opts, &[3, 3, 3], &q, &DecodeConfig::greedy(2)).unwrap();
    assert_eq!(same.std, 0.0);
    assert!(same.fractions.iter().all(|&f| f == same.fractions[0]));

    let singletons = ClusterOptions {
        max_iterations: 5,
        ..ClusterOptions::new(64)
    };
    let r = seed_robustness(&e, &singletons, &[1, 2, 3], &q, &DecodeConfig::greedy(64)).unwrap();
    assert_eq!(r.fractions, vec![1.0; 3]);
    assert_eq!((r.mean, r.std), (1.0, 0.0));

    assert!(seed_robustness(&e, &opts, &[1], &q, &DecodeConfig::greedy(2)).is_err());
}

#[test]
fn ablation_full_probe_and_cover() {
    let _g = serial();
    let e = clustered_embeddings(480, 8, 12, 0.6, 2);
    let q = unit_normal_queries(60, 8, 4);
    let opts = ClusterOptions {
        max_iterations: 15,
        ..ClusterOptions::new(24)
    };
    let r = ablation_balance(&e, &opts, &q, &DecodeConfig::greedy(24), 1, 30, 10).unwrap();
    assert_eq!(r.balanced.containment.fraction, 1.0);
    assert_eq!(r.unbalanced.containment.fraction, 1.0);
    assert_eq!(r.balanced.cluster_size, 20);
    assert!(r.unbalanced.cluster_size >= 20);
    assert_eq!(r.balanced.latency.reps, 30);
}

#[test]
fn bench_excludes_warmup_and_self_ratio_is_near_one() {
    let _g = serial();
    let e = flashhead::synth::gaussian_embeddings(8192, 64, 1);
    let q = unit_normal_queries(16, 64, 2);
    let mut a = DenseHead::new(&e);
    let mut b = DenseHead::new(&e);
    let mut calls = 0;
    let (sa, sb) = bench_pair(
        &q,
        60,
        10,
        |h| {
            calls += 1;
            a.argmax(h)
        },
        |h| b.argmax(h),
    );
    assert_eq!(calls, 70);
    assert_eq!((sa.reps, sa.warmup), (60, 10));
    let ratio = sa.median_ms / sb.median_ms;
    assert!((0.5..2.0).contains(&ratio), "{ratio}");
}

#[test]
fn bench_protocol_minimums() {
    let _g = serial();
    let (e, index) = random_instance(256, 8, 16, 1);
    let head = FlashHead::new(&index, &e).unwrap();
    let q = unit_normal_queries(4, 8, 2);
    assert!(bench_tpot_head(&head, &q, 4, 29, 10).is_err());
    assert!(bench_tpot_head(&head, &q, 4, 30, 9).is_err());
    let r = bench_tpot_head(&head, &q, 4, 30, 10).unwrap();
    assert_eq!((r.flash.reps, r.flash.warmup, r.dense.reps), (30, 10, 30));
    assert!(!r.hardware.is_empty());
}

fn median_ratio(e: &Matrix, c: usize, p: usize, q: &HiddenBatch) -> f64 {
    let (unit, _) = flashhead::normalize_rows_lossy(e);
    let assignment = flashhead::synth::random_balanced_assignment(e.rows(), c, 7);
    let index =
        flashhead::ClusteredIndex::from_partition(&unit, &assignment, c, Default::default())
            .unwrap();
    let head = FlashHead::new(&index, e).unwrap();
    let mut dense = DenseHead::new(e);
    let (flash, dense) = bench_pair(q, 40, 10, greedy_decoder(&head, p), |h| dense.argmax(h));
    dense.median_ms / flash.median_ms
}

#[test]
fn measured_speedup_tracks_cost_model() {
    let _g = serial();
    let (v, d) = (32_768, 1024);
    let e = flashhead::synth::gaussian_embeddings(v, d, 3);
    let q = unit_normal_queries(16, d, 4);
    let grid = [
        (256, 16),
        (256, 64),
        (512, 32),
        (512, 128),
        (1024, 64),
        (1024, 256),
    ];
    for (c, p) in grid {
        let predicted = cost_model(v as u64, d as u64, c as u64, p as u64)
            .unwrap()
            .ratio;
        let measured = median_ratio(&e, c, p, &q);
        let gap = (measured / predicted).max(predicted / measured);
        eprintln!("c={c} p={p}: measured {measured:.2}, predicted {predicted:.2}");
        assert!(
            gap < 2.0,
            "c={c} p={p}: measured {measured:.2}, predicted {predicted:.2}"
        );
    }
}

#[test]
fn break_even_config_is_not_faster() {
    let _g = serial();
    // p·b + c = v: two-stage work equals the dense product
    let (v, d, c) = (32_768, 128, 256);
    let p = (v - c) / (v / c);
    let m = cost_model(v as u64, d as u64, c as u64, p as u64).unwrap();
    assert_eq!(m.flash_mults, m.dense_mults);
    let e = flashhead::synth::gaussian_embeddings(v, d, 5);
    let q = unit_normal_queries(8, d, 6);
    let speedup = median_ratio(&e, c, p, &q);
    assert!(speedup <= 1.2, "{speedup}");
}

#[test]
fn reports_are_deterministic_apart_from_timing() {
    let _g = serial();
    let e = clustered_embeddings(512, 8, 16, 0.6, 8);
    let q = hard_queries(&e, 80, 3.0, 1);
    let opts = ClusterOptions {
        max_iterations: 8,
        init: Init::Uniform,
        ..ClusterOptions::new(16)
    };
    let run = || {
        let mut rows = Vec::new();
        sweep(&e, &opts, &[8, 16], &[2, 4], &q, 30, 10, |_| {})
            .unwrap()
            .into_iter()
            .for_each(|r| {
                rows.push((
                    r.clusters,
                    r.probes,
                    r.containment.to_bits(),
                    r.cost_ratio.to_bits(),
                ));
            });
        rows
    };
    let a = run();
    assert_eq!(a.len(), 4);
    assert_eq!(a, run());

    let sample = DecodeConfig::sample(4, 0.9, 11);
    let index =
        flashhead::spherical_kmeans(&flashhead::normalize_rows(&e).unwrap(), &opts).unwrap();
    let x = containment(&index, &e, &q, &sample, 3).unwrap();
    let y = containment(&index, &e, &q, &sample, 3).unwrap();
    assert_eq!(x, y);
}

#[test]
fn sweep_rejects_bad_grid_before_work() {
    let _g = serial();
    let e = clustered_embeddings(64, 4, 4, 0.5, 1);
    let q = unit_normal_queries(4, 4, 1);
    let opts = ClusterOptions::new(8);
    assert!(sweep(&e, &opts, &[7], &[1], &q, 30, 10, |_| panic!(
        "no rows expected"
    ))
    .is_err());
    assert!(sweep(&e, &opts, &[8], &[9], &q, 30, 10, |_| panic!(
        "no rows expected"
    ))
    .is_err());
}
