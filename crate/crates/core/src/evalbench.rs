//! Dense-head oracle, top-k containment, ablations and head-only latency.

use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::{normalize_rows_lossy, spherical_kmeans, ClusterOptions, ClusteredIndex};
use crate::error::{Error, Result};
use crate::head::{cost_model, DecodeConfig, DecodeMode, FlashHead, Scratch};
use crate::matrix::{argmax, top_k_indices, HiddenBatch, Matrix};

/// Top-`k` token ids of the full product `E·h`, lower id first on ties.
pub fn dense_head_oracle(e: &Matrix, h: &[f32], k: usize) -> Result<Vec<u32>> {
    if h.len() != e.cols() {
        return Err(Error::DimMismatch(format!(
            "hidden state has length {}, expected {}",
            h.len(),
            e.cols()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    Ok(top_k_indices(&e.matvec(h), k))
}

/// Dense greedy head with a reusable logit buffer.
#[derive(Debug, Clone)]
pub struct DenseHead<'a> {
    embeddings: &'a Matrix,
    logits: Vec<f32>,
}

impl<'a> DenseHead<'a> {
    pub fn new(embeddings: &'a Matrix) -> Self {
        Self {
            embeddings,
            logits: vec![0.0; embeddings.rows()],
        }
    }

    pub fn argmax(&mut self, h: &[f32]) -> u32 {
        self.embeddings.matvec_into(h, &mut self.logits);
        argmax(&self.logits) as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainmentReport {
    pub k: usize,
    pub n: usize,
    pub hits: usize,
    pub fraction: f64,
    pub clusters: usize,
    pub probes: usize,
    pub mode: &'static str,
    pub quant_bits: Option<u8>,
}

fn mode_name(mode: &DecodeMode) -> &'static str {
    match mode {
        DecodeMode::Greedy => "greedy",
        DecodeMode::Sample { .. } => "sample",
    }
}

/// Generator for query `i`: stream `i` of a ChaCha stream seeded by `seed`.
pub fn query_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Fraction of queries whose decoded token lies in the dense top-`k`.
pub fn containment(
    index: &ClusteredIndex,
    e: &Matrix,
    queries: &HiddenBatch,
    cfg: &DecodeConfig,
    k: usize,
) -> Result<ContainmentReport> {
    containment_with(&FlashHead::new(index, e)?, queries, cfg, k)
}

/// [`containment`] for a prepared head, e.g. one with quantized stage 1.
/// Precomputed labels in `queries.oracle_top_k` are used when they hold at
/// least `k` ids.
pub fn containment_with(
    head: &FlashHead<'_>,
    queries: &HiddenBatch,
    cfg: &DecodeConfig,
    k: usize,
) -> Result<ContainmentReport> {
    let e = head.embeddings();
    queries.check_dim(e.cols())?;
    cfg.validate(head.index().clusters())?;
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let labels = queries
        .oracle_top_k
        .as_ref()
        .filter(|l| l.len() == queries.len() && l.iter().all(|x| x.len() >= k));
    let hit = |i: usize| -> Result<bool> {
        let h = queries.query(i);
        let token = head.decode(h, cfg, &mut query_rng(cfg.seed, i))?;
        Ok(match labels {
            Some(l) => l[i][..k].contains(&token),
            None => dense_head_oracle(e, h, k)?.contains(&token),
        })
    };
    #[cfg(feature = "parallel")]
    let outcomes: Vec<bool> = {
        use rayon::prelude::*;
        (0..queries.len())
            .into_par_iter()
            .map(hit)
            .collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<bool> = (0..queries.len()).map(hit).collect::<Result<_>>()?;
    let hits = outcomes.iter().filter(|&&x| x).count();
    let n = queries.len();
    Ok(ContainmentReport {
        k,
        n,
        hits,
        fraction: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        clusters: head.index().clusters(),
        probes: cfg.probes,
        mode: mode_name(&cfg.mode),
        quant_bits: head.quantized().map(|q| q.bits()),
    })
}

/// Fills `oracle_top_k` with the dense top-`k` of every query.
pub fn label_queries(e: &Matrix, queries: &mut HiddenBatch, k: usize) -> Result<()> {
    let labels = (0..queries.len())
        .map(|i| dense_head_oracle(e, queries.query(i), k))
        .collect::<Result<Vec<_>>>()?;
    queries.oracle_top_k = Some(labels);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub reps: usize,
    pub warmup: usize,
}

impl LatencyStats {
    /// Summary of per-token times in milliseconds.
    pub fn from_samples(samples_ms: &[f64], warmup: usize) -> Self {
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        let p95 = if n == 0 {
            f64::NAN
        } else {
            s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1]
        };
        Self {
            mean_ms: s.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: p95,
            reps: n,
            warmup,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub flash: LatencyStats,
    pub dense: LatencyStats,
    /// Dense median over FlashHead median.
    pub speedup_vs_dense: f64,
    pub hardware: String,
}

pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 10;

pub fn check_protocol(reps: usize, warmup: usize) -> Result<()> {
    if reps < MIN_REPS || warmup < MIN_WARMUP {
        return Err(Error::InvalidConfig(format!(
            "benchmark needs at least {MIN_REPS} reps and {MIN_WARMUP} warmup runs, got {reps} and {warmup}"
        )));
    }
    Ok(())
}

/// Times two single-token heads on the same queries, alternating between
/// them on every rep so slow drift in machine state hits both equally.
/// The first `warmup` runs of each are discarded.
pub fn bench_pair(
    queries: &HiddenBatch,
    reps: usize,
    warmup: usize,
    mut a: impl FnMut(&[f32]) -> u32,
    mut b: impl FnMut(&[f32]) -> u32,
) -> (LatencyStats, LatencyStats) {
    assert!(!queries.is_empty(), "benchmark needs at least one query");
    let mut ta = Vec::with_capacity(reps);
    let mut tb = Vec::with_capacity(reps);
    for i in 0..warmup + reps {
        let h = queries.query(i % queries.len());
        let start = Instant::now();
        black_box(a(black_box(h)));
        let da = start.elapsed().as_secs_f64() * 1e3;
        let start = Instant::now();
        black_box(b(black_box(h)));
        let db = start.elapsed().as_secs_f64() * 1e3;
        if i >= warmup {
            ta.push(da);
            tb.push(db);
        }
    }
    (
        LatencyStats::from_samples(&ta, warmup),
        LatencyStats::from_samples(&tb, warmup),
    )
}

/// Greedy single-token closure over a prepared head.
pub fn greedy_decoder<'h>(
    head: &'h FlashHead<'h>,
    probes: usize,
) -> impl FnMut(&[f32]) -> u32 + 'h {
    let cfg = DecodeConfig::greedy(probes);
    let mut scratch = Scratch::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    move |h| {
        head.decode_with(h, &cfg, &mut rng, &mut scratch)
            .expect("inputs validated before timing")
    }
}

/// Head-only time per output token, FlashHead (greedy, `probes`) against the
/// dense matmul + argmax, batch size 1.
pub fn bench_tpot_head(
    head: &FlashHead<'_>,
    queries: &HiddenBatch,
    probes: usize,
    reps: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    check_protocol(reps, warmup)?;
    queries.check_dim(head.embeddings().cols())?;
    DecodeConfig::greedy(probes).validate(head.index().clusters())?;
    if queries.is_empty() {
        return Err(Error::InvalidConfig("no queries to benchmark".into()));
    }
    let mut dense = DenseHead::new(head.embeddings());
    let (flash, dense) = bench_pair(queries, reps, warmup, greedy_decoder(head, probes), |h| {
        dense.argmax(h)
    });
    Ok(LatencyReport {
        speedup_vs_dense: dense.median_ms / flash.median_ms,
        flash,
        dense,
        hardware: hardware_descriptor(),
    })
}

/// CPU model, logical core count and the rayon pool size.
pub fn hardware_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    #[cfg(feature = "parallel")]
    let pool = rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    let pool = 1;
    format!("{model}; {cores} logical cores; {pool} worker threads")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub containment: ContainmentReport,
    pub latency: LatencyStats,
    pub cluster_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub balanced: AblationArm,
    pub unbalanced: AblationArm,
}

/// Builds a balanced and an unbalanced index from the same options and seed
/// and reports containment and head latency for both.
pub fn ablation_balance(
    e: &Matrix,
    opts: &ClusterOptions,
    queries: &HiddenBatch,
    cfg: &DecodeConfig,
    k: usize,
    reps: usize,
    warmup: usize,
) -> Result<AblationReport> {
    check_protocol(reps, warmup)?;
    let (e_unit, _) = normalize_rows_lossy(e);
    let balanced = spherical_kmeans(
        &e_unit,
        &ClusterOptions {
            balanced: true,
            ..*opts
        },
    )?;
    let unbalanced = spherical_kmeans(
        &e_unit,
        &ClusterOptions {
            balanced: false,
            ..*opts
        },
    )?;
    ablation_with(e, &balanced, &unbalanced, queries, cfg, k, reps, warmup)
}

/// The measurement half of [`ablation_balance`] for prebuilt indexes.
#[allow(clippy::too_many_arguments)]
pub fn ablation_with(
    e: &Matrix,
    balanced: &ClusteredIndex,
    unbalanced: &ClusteredIndex,
    queries: &HiddenBatch,
    cfg: &DecodeConfig,
    k: usize,
    reps: usize,
    warmup: usize,
) -> Result<AblationReport> {
    check_protocol(reps, warmup)?;
    let hb = FlashHead::new(balanced, e)?;
    let hu = FlashHead::new(unbalanced, e)?;
    let cb = containment_with(&hb, queries, cfg, k)?;
    let cu = containment_with(&hu, queries, cfg, k)?;
    let (lb, lu) = bench_pair(
        queries,
        reps,
        warmup,
        greedy_decoder(&hb, cfg.probes),
        greedy_decoder(&hu, cfg.probes),
    );
    Ok(AblationReport {
        balanced: AblationArm {
            containment: cb,
            latency: lb,
            cluster_size: balanced.cluster_size(),
        },
        unbalanced: AblationArm {
            containment: cu,
            latency: lu,
            cluster_size: unbalanced.cluster_size(),
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator).
    pub std: f64,
}

/// Rebuilds the index once per seed and reports top-1 containment spread.
pub fn seed_robustness(
    e: &Matrix,
    opts: &ClusterOptions,
    seeds: &[u64],
    queries: &HiddenBatch,
    cfg: &DecodeConfig,
) -> Result<RobustnessReport> {
    if seeds.len() < 2 {
        return Err(Error::InvalidConfig(
            "seed robustness needs at least two seeds".into(),
        ));
    }
    let (e_unit, _) = normalize_rows_lossy(e);
    let mut labelled = queries.clone();
    if labelled.oracle_top_k.is_none() {
        label_queries(e, &mut labelled, 1)?;
    }
    let fractions = seeds
        .iter()
        .map(|&seed| {
            let index = spherical_kmeans(&e_unit, &ClusterOptions { seed, ..*opts })?;
            containment(&index, e, &labelled, cfg, 1).map(|r| r.fraction)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&fractions);
    Ok(RobustnessReport {
        seeds: seeds.to_vec(),
        fractions,
        mean,
        std,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    // shifted by the first value so identical inputs give exactly zero spread
    let x0 = xs.first().copied().unwrap_or(0.0);
    let mean = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub clusters: usize,
    pub probes: usize,
    pub containment: f64,
    pub flash_median_ms: f64,
    pub dense_median_ms: f64,
    pub speedup: f64,
    pub cost_ratio: f64,
}

/// Containment and latency over a `(c, p)` grid. One index is built per
/// cluster count and shared by all its probe counts; pairs with `p > c` or
/// `c ∤ v` are rejected up front.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    e: &Matrix,
    base: &ClusterOptions,
    clusters: &[usize],
    probes: &[usize],
    queries: &HiddenBatch,
    reps: usize,
    warmup: usize,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    check_protocol(reps, warmup)?;
    for &c in clusters {
        ClusterOptions {
            clusters: c,
            ..*base
        }
        .validate(e.rows())?;
        for &p in probes {
            cost_model(e.rows() as u64, e.cols() as u64, c as u64, p as u64)?;
        }
    }
    let (e_unit, _) = normalize_rows_lossy(e);
    let mut labelled = queries.clone();
    label_queries(e, &mut labelled, 1)?;
    let mut rows = Vec::new();
    for &c in clusters {
        let index = spherical_kmeans(
            &e_unit,
            &ClusterOptions {
                clusters: c,
                ..*base
            },
        )?;
        let head = FlashHead::new(&index, e)?;
        for &p in probes {
            let cfg = DecodeConfig::greedy(p);
            let fraction = containment_with(&head, &labelled, &cfg, 1)?.fraction;
            let report = bench_tpot_head(&head, queries, p, reps, warmup)?;
            let row = SweepRow {
                clusters: c,
                probes: p,
                containment: fraction,
                flash_median_ms: report.flash.median_ms,
                dense_median_ms: report.dense.median_ms,
                speedup: report.speedup_vs_dense,
                cost_ratio: cost_model(e.rows() as u64, e.cols() as u64, c as u64, p as u64)?.ratio,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_summary() {
        let s = LatencyStats::from_samples(&[3.0, 1.0, 2.0, 4.0], 10);
        assert_eq!(s.median_ms, 2.5);
        assert_eq!(s.mean_ms, 2.5);
        assert_eq!(s.p95_ms, 4.0);
        assert_eq!((s.reps, s.warmup), (4, 10));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[0.5, 0.5]).1, 0.0);
    }

    #[test]
    fn oracle_on_orthogonal_rows() {
        let e = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(dense_head_oracle(&e, &[0.0, 1.0, 0.0], 1).unwrap(), vec![1]);
        assert_eq!(
            dense_head_oracle(&e, &[0.0, 1.0, 0.0], 3).unwrap(),
            vec![1, 0, 2]
        );
        assert!(dense_head_oracle(&e, &[1.0], 1).is_err());
    }

    #[test]
    fn protocol_minimums_enforced() {
        assert!(check_protocol(29, 10).is_err());
        assert!(check_protocol(30, 9).is_err());
        assert!(check_protocol(30, 10).is_ok());
    }
}
