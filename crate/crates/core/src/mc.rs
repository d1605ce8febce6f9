//! Full-vocabulary marginal `p(t | h)` under stochastic probe selection.
//!
//! Sampled decoding only ever sees the tokens of the drawn probe set `S`, so
//! the distribution it actually samples from is the average of the candidate
//! softmaxes over random `S`. [`mc_marginal`] estimates it by drawing `N`
//! probe sets and accumulating each set's full candidate softmax in `f64`;
//! [`exact_marginal`] enumerates every subset for tiny indexes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::ClusteredIndex;
use crate::error::{Error, Result};
use crate::head::{centroid_logits, gumbel_keys, top_k_f64};
use crate::matrix::{dot, Matrix};

/// Largest number of probe subsets [`exact_marginal`] will enumerate.
pub const SUBSET_LIMIT: u128 = 1_000_000;

/// Draws handled per independently seeded chunk.
const CHUNK_SAMPLES: u64 = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalEstimate {
    pub probs: Vec<f64>,
    pub n_samples: u64,
    /// Entries raised from zero by [`clip_zeros`].
    pub clipped: usize,
    /// Value zeros were raised to, 0 when never clipped.
    pub clip_value: f64,
}

impl MarginalEstimate {
    fn new(probs: Vec<f64>, n_samples: u64) -> Self {
        Self {
            probs,
            n_samples,
            clipped: 0,
            clip_value: 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Temperature-scaled token logits and their per-cluster summaries.
struct Prepared {
    /// `z_t / τ` for every token.
    scaled: Vec<f64>,
    /// Per cluster: the largest scaled logit `M_k`.
    max: Vec<f64>,
    /// Per cluster: `Σ_t exp(z_t/τ − M_k)`.
    mass: Vec<f64>,
    centroid_logits: Vec<f32>,
}

fn check_inputs(index: &ClusteredIndex, e: &Matrix, h: &[f32], p: usize, tau: f64) -> Result<()> {
    if e.rows() != index.vocab() || e.cols() != index.dim() || h.len() != index.dim() {
        return Err(Error::DimMismatch(format!(
            "index {}×{} over {} tokens, embeddings {}×{}, hidden state {}",
            index.clusters(),
            index.dim(),
            index.vocab(),
            e.rows(),
            e.cols(),
            h.len()
        )));
    }
    if p == 0 || p > index.clusters() {
        return Err(Error::InvalidConfig(format!(
            "probe count {p} outside 1..={}",
            index.clusters()
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature {tau} must be positive"
        )));
    }
    Ok(())
}

fn prepare(index: &ClusteredIndex, e: &Matrix, h: &[f32], tau: f64) -> Result<Prepared> {
    let scaled: Vec<f64> = e.iter_rows().map(|r| dot(r, h) as f64 / tau).collect();
    let c = index.clusters();
    let mut max = vec![f64::NEG_INFINITY; c];
    let mut mass = vec![0.0; c];
    for k in 0..c {
        for t in index.cluster_members(k) {
            max[k] = max[k].max(scaled[t as usize]);
        }
        for t in index.cluster_members(k) {
            mass[k] += (scaled[t as usize] - max[k]).exp();
        }
    }
    Ok(Prepared {
        scaled,
        max,
        mass,
        centroid_logits: centroid_logits(index, h)?,
    })
}

/// Adds the candidate softmax of probe set `probes` to the per-cluster
/// weights: every token `t` of cluster `k ∈ S` receives
/// `exp(z_t/τ − M_k) · weight[k]`.
fn accumulate(prep: &Prepared, probes: &[u32], weight: &mut [f64]) {
    let top = probes
        .iter()
        .map(|&k| prep.max[k as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = probes
        .iter()
        .map(|&k| (prep.max[k as usize] - top).exp() * prep.mass[k as usize])
        .sum();
    for &k in probes {
        weight[k as usize] += (prep.max[k as usize] - top).exp() / z;
    }
}

fn expand(index: &ClusteredIndex, prep: &Prepared, weight: &[f64], n: u64) -> Vec<f64> {
    let mut probs = vec![0.0; index.vocab()];
    for (k, &w) in weight.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for t in index.cluster_members(k) {
            let t = t as usize;
            probs[t] = (prep.scaled[t] - prep.max[k]).exp() * w / n as f64;
        }
    }
    probs
}

/// Runs `n` draws in fixed-size chunks, each with its own generator seeded
/// from `rng`, and merges the chunk results in chunk order. The result does
/// not depend on how many threads execute the chunks.
fn run_chunks<R, T, F, M>(n: u64, rng: &mut R, work: F, mut merge: M)
where
    R: Rng + ?Sized,
    T: Send,
    F: Fn(u64, &mut ChaCha8Rng) -> T + Sync,
    M: FnMut(T),
{
    let chunks: Vec<(u64, u64)> = (0..n.div_ceil(CHUNK_SAMPLES))
        .map(|i| {
            let len = CHUNK_SAMPLES.min(n - i * CHUNK_SAMPLES);
            (len, rng.random())
        })
        .collect();
    let run = |&(len, seed): &(u64, u64)| work(len, &mut ChaCha8Rng::seed_from_u64(seed));
    #[cfg(feature = "parallel")]
    let parts: Vec<T> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<T> = chunks.iter().map(run).collect();
    parts.into_iter().for_each(&mut merge);
}

/// Monte Carlo estimate of the marginal from `n` sampled probe sets.
pub fn mc_marginal<R: Rng + ?Sized>(
    index: &ClusteredIndex,
    e: &Matrix,
    h: &[f32],
    p: usize,
    tau: f64,
    n: u64,
    rng: &mut R,
) -> Result<MarginalEstimate> {
    check_inputs(index, e, h, p, tau)?;
    if n == 0 {
        return Err(Error::InvalidConfig(
            "sample count must be at least 1".into(),
        ));
    }
    let prep = prepare(index, e, h, tau)?;
    let c = index.clusters();
    let mut weight = vec![0.0f64; c];
    run_chunks(
        n,
        rng,
        |len, rng| {
            let mut part = vec![0.0f64; c];
            let mut keys = Vec::with_capacity(c);
            let mut probes = Vec::with_capacity(c);
            for _ in 0..len {
                gumbel_keys(&prep.centroid_logits, tau as f32, rng, &mut keys);
                top_k_f64(&keys, p, &mut probes);
                accumulate(&prep, &probes, &mut part);
            }
            part
        },
        |part| {
            for (w, x) in weight.iter_mut().zip(part) {
                *w += x;
            }
        },
    );
    Ok(MarginalEstimate::new(expand(index, &prep, &weight, n), n))
}

/// Token-frequency estimate: each draw samples one probe set and then one
/// token from its candidate softmax. Same sampling law as [`mc_marginal`],
/// kept for variance comparisons.
pub fn mc_token_counts<R: Rng + ?Sized>(
    index: &ClusteredIndex,
    e: &Matrix,
    h: &[f32],
    p: usize,
    tau: f64,
    n: u64,
    rng: &mut R,
) -> Result<MarginalEstimate> {
    check_inputs(index, e, h, p, tau)?;
    if n == 0 {
        return Err(Error::InvalidConfig(
            "sample count must be at least 1".into(),
        ));
    }
    let prep = prepare(index, e, h, tau)?;
    let c = index.clusters();
    let mut counts = vec![0u64; index.vocab()];
    run_chunks(
        n,
        rng,
        |len, rng| {
            let mut hits = Vec::with_capacity(len as usize);
            let mut keys = Vec::with_capacity(c);
            let mut probes = Vec::with_capacity(c);
            let mut cands: Vec<(u32, f64)> = Vec::new();
            for _ in 0..len {
                gumbel_keys(&prep.centroid_logits, tau as f32, rng, &mut keys);
                top_k_f64(&keys, p, &mut probes);
                cands.clear();
                for &k in &probes {
                    cands.extend(
                        index
                            .cluster_members(k as usize)
                            .map(|t| (t, prep.scaled[t as usize])),
                    );
                }
                let top = cands.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = cands.iter().map(|x| (x.1 - top).exp()).sum();
                let mut target = rng.random::<f64>() * total;
                let mut pick = cands[cands.len() - 1].0;
                for &(t, s) in &cands {
                    let w = (s - top).exp();
                    if target < w {
                        pick = t;
                        break;
                    }
                    target -= w;
                }
                hits.push(pick);
            }
            hits
        },
        |hits| {
            for t in hits {
                counts[t as usize] += 1;
            }
        },
    );
    let probs = counts.iter().map(|&k| k as f64 / n as f64).collect();
    Ok(MarginalEstimate::new(probs, n))
}

/// `softmax(E·h / τ)` over the whole vocabulary, in `f64`.
pub fn dense_softmax(e: &Matrix, h: &[f32], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = e.iter_rows().map(|r| dot(r, h) as f64 / tau).collect();
    softmax_f64(&scaled)
}

fn softmax_f64(x: &[f64]) -> Vec<f64> {
    let top = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = x.iter().map(|&v| (v - top).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Probability that sequential sampling without replacement, with draw
/// weights `weights`, picks exactly the set `subset` in its first
/// `subset.len()` draws.
///
/// Small sets sum over every draw order. Larger sets integrate
/// `∫₀¹ Π_{i∈S} (1 − u^{w_i/W'}) du`, where `W'` is the weight outside `S`.
pub fn subset_probability(weights: &[f64], subset: &[usize]) -> f64 {
    if subset.len() <= 3 {
        subset_probability_orderings(weights, subset)
    } else {
        subset_probability_integral(weights, subset)
    }
}

pub fn subset_probability_orderings(weights: &[f64], subset: &[usize]) -> f64 {
    let total: f64 = weights.iter().sum();
    fn go(weights: &[f64], rest: &mut Vec<usize>, left: f64) -> f64 {
        if rest.is_empty() {
            return 1.0;
        }
        let mut sum = 0.0;
        for i in 0..rest.len() {
            let k = rest.swap_remove(i);
            sum += weights[k] / left * go(weights, rest, left - weights[k]);
            rest.push(k);
            let last = rest.len() - 1;
            rest.swap(i, last);
        }
        sum
    }
    go(weights, &mut subset.to_vec(), total)
}

pub fn subset_probability_integral(weights: &[f64], subset: &[usize]) -> f64 {
    let mut inside = vec![false; weights.len()];
    for &k in subset {
        inside[k] = true;
    }
    let outside: f64 = weights
        .iter()
        .zip(&inside)
        .filter(|(_, &i)| !i)
        .map(|(w, _)| w)
        .sum();
    if outside == 0.0 {
        return 1.0;
    }
    let exps: Vec<f64> = subset.iter().map(|&k| weights[k] / outside).collect();
    // integrand in terms of ln u, so both endpoints stay accurate
    let f = |ln_u: f64| exps.iter().map(|&a| -(a * ln_u).exp_m1()).product::<f64>();
    tanh_sinh_unit(f)
}

/// `∫₀¹ f(u) du` by tanh-sinh quadrature; `f` receives `ln u`.
fn tanh_sinh_unit(f: impl Fn(f64) -> f64) -> f64 {
    use std::f64::consts::FRAC_PI_2;
    let eval = |t: f64| {
        let s = FRAC_PI_2 * t.sinh();
        let weight = FRAC_PI_2 * t.cosh() / (s.cosh() * s.cosh()) / 2.0;
        // u = (1 + tanh s) / 2 = 1 / (1 + e^{-2s})
        let ln_u = -(-2.0 * s).exp().ln_1p();
        weight * f(ln_u)
    };
    let limit = 4.5f64;
    let mut h = 0.5;
    let mut prev = f64::NAN;
    loop {
        let steps = (limit / h).ceil() as i64;
        let sum: f64 = (-steps..=steps).map(|i| eval(i as f64 * h)).sum::<f64>() * h;
        if (sum - prev).abs() < 1e-14 || h < 1.0 / 512.0 {
            return sum;
        }
        prev = sum;
        h /= 2.0;
    }
}

fn next_combination(comb: &mut [usize], n: usize) -> bool {
    let k = comb.len();
    for i in (0..k).rev() {
        if comb[i] < n - k + i {
            comb[i] += 1;
            for j in i + 1..k {
                comb[j] = comb[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exact marginal by enumerating every probe subset, each weighted by its
/// without-replacement selection probability.
pub fn exact_marginal(
    index: &ClusteredIndex,
    e: &Matrix,
    h: &[f32],
    p: usize,
    tau: f64,
) -> Result<MarginalEstimate> {
    check_inputs(index, e, h, p, tau)?;
    let c = index.clusters();
    let subsets = binomial(c as u64, p as u64);
    if subsets > SUBSET_LIMIT {
        return Err(Error::TooManySubsets {
            subsets,
            limit: SUBSET_LIMIT,
        });
    }
    let stage1: Vec<f64> = index
        .centroids()
        .iter_rows()
        .map(|r| dot(r, h) as f64 / tau)
        .collect();
    let top = stage1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = stage1.iter().map(|&l| (l - top).exp()).collect();
    let scaled: Vec<f64> = e.iter_rows().map(|r| dot(r, h) as f64 / tau).collect();

    let mut probs = vec![0.0f64; index.vocab()];
    let mut comb: Vec<usize> = (0..p).collect();
    let mut tokens = Vec::new();
    loop {
        let prob = subset_probability(&weights, &comb);
        tokens.clear();
        for &k in &comb {
            tokens.extend(index.cluster_members(k).map(|t| t as usize));
        }
        let local: Vec<f64> = tokens.iter().map(|&t| scaled[t]).collect();
        for (&t, q) in tokens.iter().zip(softmax_f64(&local)) {
            probs[t] += prob * q;
        }
        if !next_combination(&mut comb, c) {
            break;
        }
    }
    Ok(MarginalEstimate::new(probs, 0))
}

/// Raises every zero entry to the smallest non-zero entry. No renormalization.
pub fn clip_zeros(est: &MarginalEstimate) -> Result<MarginalEstimate> {
    let floor = est
        .probs
        .iter()
        .copied()
        .filter(|&x| x > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return Err(Error::AllZero);
    }
    let mut out = est.clone();
    let mut clipped = 0;
    for x in &mut out.probs {
        if *x == 0.0 {
            *x = floor;
            clipped += 1;
        }
    }
    out.clipped = est.clipped + clipped;
    out.clip_value = floor;
    Ok(out)
}

/// `Σ ln p̂(t)` over `tokens`.
pub fn log_likelihood(est: &MarginalEstimate, tokens: &[u32]) -> Result<f64> {
    let mut sum = 0.0f64;
    for &t in tokens {
        let p = *est.probs.get(t as usize).ok_or_else(|| {
            Error::DimMismatch(format!(
                "token {t} outside vocabulary of {}",
                est.probs.len()
            ))
        })?;
        if p <= 0.0 {
            return Err(Error::ZeroProbability { token: t as usize });
        }
        sum += p.ln();
    }
    Ok(sum)
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
