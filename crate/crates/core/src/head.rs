//! Two-stage retrieval head.
//!
//! Stage 1 scores the `c` unit centroids against the hidden state and picks
//! `p` probe clusters (top-p, or sampled without replacement). The probed
//! clusters' tokens are gathered through `C2T` and stage 2 scores only those
//! rows of the original embedding matrix before the final argmax or draw.

use rand::Rng;

use crate::clustering::{ClusteredIndex, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::matrix::{dot, dot_f64, top_k_indices, Matrix};
use crate::quant::QuantizedCentroids;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample {
        temperature: f32,
        /// Temperature of the probe softmax; defaults to `temperature`.
        stage1_temperature: Option<f32>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub probes: usize,
    pub mode: DecodeMode,
    pub seed: u64,
    /// Accumulate stage-2 logits in `f64` instead of `f32`.
    pub accumulate_f64: bool,
}

impl DecodeConfig {
    pub fn greedy(probes: usize) -> Self {
        Self {
            probes,
            mode: DecodeMode::Greedy,
            seed: 0,
            accumulate_f64: false,
        }
    }

    pub fn sample(probes: usize, temperature: f32, seed: u64) -> Self {
        Self {
            probes,
            mode: DecodeMode::Sample {
                temperature,
                stage1_temperature: None,
            },
            seed,
            accumulate_f64: false,
        }
    }

    pub fn validate(&self, clusters: usize) -> Result<()> {
        if self.probes == 0 || self.probes > clusters {
            return Err(Error::InvalidConfig(format!(
                "probe count {} outside 1..={clusters}",
                self.probes
            )));
        }
        if let DecodeMode::Sample {
            temperature,
            stage1_temperature,
        } = self.mode
        {
            let ok = |t: f32| t.is_finite() && t > 0.0;
            if !ok(temperature) || !stage1_temperature.is_none_or(ok) {
                return Err(Error::InvalidConfig(
                    "sampling temperatures must be positive and finite".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSelection {
    pub probe_ids: Vec<u32>,
    pub probe_logits: Vec<f32>,
}

/// Tokens of the probed clusters and their gathered embedding rows `Ẽ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub token_ids: Vec<u32>,
    /// Row-major `token_ids.len() × d`, copied verbatim from `E`.
    pub sub_matrix: Vec<f32>,
    pub dim: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.sub_matrix[i * self.dim..(i + 1) * self.dim]
    }
}

/// `C × h`.
pub fn centroid_logits(index: &ClusteredIndex, h: &[f32]) -> Result<Vec<f32>> {
    check_hidden(h, index.dim())?;
    Ok(index.centroids().matvec(h))
}

/// The `p` highest-scoring clusters, ties broken by lower cluster id.
pub fn select_probes_greedy(logits: &[f32], p: usize) -> ProbeSelection {
    let probe_ids = top_k_indices(logits, p);
    let probe_logits = probe_ids.iter().map(|&k| logits[k as usize]).collect();
    ProbeSelection {
        probe_ids,
        probe_logits,
    }
}

/// Draws `p` distinct clusters without replacement from
/// `softmax(logits / temperature)` via Gumbel-top-k: perturb every scaled
/// logit with independent standard Gumbel noise and keep the `p` largest.
pub fn select_probes_sampled<R: Rng + ?Sized>(
    logits: &[f32],
    p: usize,
    temperature: f32,
    rng: &mut R,
) -> ProbeSelection {
    let mut keys = Vec::with_capacity(logits.len());
    gumbel_keys(logits, temperature, rng, &mut keys);
    let mut ids = Vec::new();
    top_k_f64(&keys, p, &mut ids);
    let probe_logits = ids.iter().map(|&k| logits[k as usize]).collect();
    ProbeSelection {
        probe_ids: ids,
        probe_logits,
    }
}

pub(crate) fn gumbel_keys<R: Rng + ?Sized>(
    logits: &[f32],
    temperature: f32,
    rng: &mut R,
    out: &mut Vec<f64>,
) {
    let inv = 1.0 / temperature as f64;
    out.clear();
    out.extend(logits.iter().map(|&l| {
        let u: f64 = rng.random();
        l as f64 * inv - (-u.ln()).ln()
    }));
}

pub(crate) fn top_k_f64(keys: &[f64], k: usize, ids: &mut Vec<u32>) {
    let k = k.min(keys.len());
    ids.clear();
    ids.extend(0..keys.len() as u32);
    let cmp = |&a: &u32, &b: &u32| {
        keys[b as usize]
            .partial_cmp(&keys[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k == 0 {
        ids.clear();
        return;
    }
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, cmp);
        ids.truncate(k);
    }
    ids.sort_unstable_by(cmp);
}

/// Tokens of the probed clusters (pads skipped) with their original rows.
pub fn gather_candidates(
    index: &ClusteredIndex,
    embeddings: &Matrix,
    probes: &ProbeSelection,
) -> CandidateSet {
    let d = embeddings.cols();
    let mut token_ids = Vec::with_capacity(probes.probe_ids.len() * index.cluster_size());
    for &k in &probes.probe_ids {
        token_ids.extend(index.cluster_members(k as usize));
    }
    let mut sub_matrix = Vec::with_capacity(token_ids.len() * d);
    for &t in &token_ids {
        sub_matrix.extend_from_slice(embeddings.row(t as usize));
    }
    CandidateSet {
        token_ids,
        sub_matrix,
        dim: d,
    }
}

/// Full decode of one hidden state with a caller-owned generator.
pub fn decode<R: Rng + ?Sized>(
    index: &ClusteredIndex,
    embeddings: &Matrix,
    h: &[f32],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<u32> {
    FlashHead::new(index, embeddings)?.decode(h, cfg, rng)
}

/// Reusable buffers for the decode hot path.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    centroid_logits: Vec<f32>,
    keys: Vec<f64>,
    probes: Vec<u32>,
    token_ids: Vec<u32>,
    token_logits: Vec<f64>,
}

/// Everything a single decode computed, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub centroid_logits: Vec<f32>,
    pub probes: Vec<u32>,
    /// Candidate token per stage-2 slot; [`PAD_TOKEN`] marks masked slots.
    pub candidates: Vec<u32>,
    pub token_logits: Vec<f64>,
    pub token: u32,
}

/// Borrowed view binding an index to the embedding matrix it was built from,
/// with an optional low-bit copy of the centroids for stage 1.
#[derive(Debug, Clone, Copy)]
pub struct FlashHead<'a> {
    index: &'a ClusteredIndex,
    embeddings: &'a Matrix,
    quantized: Option<&'a QuantizedCentroids>,
}

impl<'a> FlashHead<'a> {
    pub fn new(index: &'a ClusteredIndex, embeddings: &'a Matrix) -> Result<Self> {
        if index.dim() != embeddings.cols() || index.vocab() != embeddings.rows() {
            return Err(Error::DimMismatch(format!(
                "index is {}-dim over {} tokens, embeddings are {}×{}",
                index.dim(),
                index.vocab(),
                embeddings.rows(),
                embeddings.cols()
            )));
        }
        Ok(Self {
            index,
            embeddings,
            quantized: None,
        })
    }

    pub fn with_quantized(mut self, quantized: &'a QuantizedCentroids) -> Result<Self> {
        if quantized.rows() != self.index.clusters() || quantized.cols() != self.index.dim() {
            return Err(Error::DimMismatch(format!(
                "quantized centroids are {}×{}, index has {}×{}",
                quantized.rows(),
                quantized.cols(),
                self.index.clusters(),
                self.index.dim()
            )));
        }
        self.quantized = Some(quantized);
        Ok(self)
    }

    pub fn index(&self) -> &'a ClusteredIndex {
        self.index
    }

    pub fn embeddings(&self) -> &'a Matrix {
        self.embeddings
    }

    pub fn quantized(&self) -> Option<&'a QuantizedCentroids> {
        self.quantized
    }

    /// Stage-1 scores, from the quantized centroids when attached.
    pub fn centroid_logits(&self, h: &[f32]) -> Result<Vec<f32>> {
        check_hidden(h, self.index.dim())?;
        let mut out = vec![0.0; self.index.clusters()];
        self.centroid_logits_into(h, &mut out);
        Ok(out)
    }

    fn centroid_logits_into(&self, h: &[f32], out: &mut [f32]) {
        match self.quantized {
            Some(q) => q.logits_into(h, out),
            None => self.index.centroids().matvec_into(h, out),
        }
    }

    pub fn decode<R: Rng + ?Sized>(
        &self,
        h: &[f32],
        cfg: &DecodeConfig,
        rng: &mut R,
    ) -> Result<u32> {
        let mut scratch = Scratch::default();
        self.decode_with(h, cfg, rng, &mut scratch)
    }

    /// Allocation-free decode once `scratch` has warmed up.
    pub fn decode_with<R: Rng + ?Sized>(
        &self,
        h: &[f32],
        cfg: &DecodeConfig,
        rng: &mut R,
        scratch: &mut Scratch,
    ) -> Result<u32> {
        check_hidden(h, self.index.dim())?;
        cfg.validate(self.index.clusters())?;
        let c = self.index.clusters();
        scratch.centroid_logits.resize(c, 0.0);
        self.centroid_logits_into(h, &mut scratch.centroid_logits);

        match cfg.mode {
            DecodeMode::Greedy => {
                let top = top_k_indices(&scratch.centroid_logits, cfg.probes);
                scratch.probes.clear();
                scratch.probes.extend(top);
            }
            DecodeMode::Sample {
                temperature,
                stage1_temperature,
            } => {
                let t1 = stage1_temperature.unwrap_or(temperature);
                gumbel_keys(&scratch.centroid_logits, t1, rng, &mut scratch.keys);
                top_k_f64(&scratch.keys, cfg.probes, &mut scratch.probes);
            }
        }

        self.score_candidates(h, cfg.accumulate_f64, scratch);
        let token = match cfg.mode {
            DecodeMode::Greedy => best_candidate(&scratch.token_ids, &scratch.token_logits),
            DecodeMode::Sample { temperature, .. } => {
                sample_candidate(&scratch.token_ids, &scratch.token_logits, temperature, rng)
            }
        };
        Ok(token)
    }

    /// Decode that also returns every intermediate.
    pub fn decode_traced<R: Rng + ?Sized>(
        &self,
        h: &[f32],
        cfg: &DecodeConfig,
        rng: &mut R,
    ) -> Result<DecodeTrace> {
        let mut scratch = Scratch::default();
        let token = self.decode_with(h, cfg, rng, &mut scratch)?;
        Ok(DecodeTrace {
            centroid_logits: scratch.centroid_logits,
            probes: scratch.probes,
            candidates: scratch.token_ids,
            token_logits: scratch.token_logits,
            token,
        })
    }

    /// Stage 2 over the probes in `scratch.probes`.
    ///
    /// Balanced: slot `s` of the `p·b` candidates is token
    /// `C2T[probes[s / b], s % b]`. Unbalanced: the padded `p × b_max` block is
    /// processed at its full static shape; pad slots gather a stand-in row and
    /// are masked to `-inf`.
    fn score_candidates(&self, h: &[f32], wide: bool, scratch: &mut Scratch) {
        let b = self.index.cluster_size();
        let slots = scratch.probes.len() * b;
        scratch.token_ids.clear();
        scratch.token_logits.clear();
        scratch.token_ids.reserve(slots);
        scratch.token_logits.reserve(slots);
        let score = |row: &[f32]| {
            if wide {
                dot_f64(row, h)
            } else {
                dot(row, h) as f64
            }
        };
        if self.index.is_balanced() {
            let c2t = self.index.c2t();
            for s in 0..slots {
                let t = c2t[scratch.probes[s / b] as usize * b + s % b];
                scratch.token_ids.push(t);
                scratch
                    .token_logits
                    .push(score(self.embeddings.row(t as usize)));
            }
        } else {
            for &k in &scratch.probes {
                for &t in self.index.cluster_row(k as usize) {
                    let valid = t != PAD_TOKEN;
                    let z = score(self.embeddings.row(if valid { t as usize } else { 0 }));
                    scratch.token_ids.push(t);
                    scratch
                        .token_logits
                        .push(if valid { z } else { f64::NEG_INFINITY });
                }
            }
        }
    }
}

/// Highest logit, lower token id on ties; masked slots never win.
fn best_candidate(ids: &[u32], logits: &[f64]) -> u32 {
    let mut best: Option<(f64, u32)> = None;
    for (&t, &z) in ids.iter().zip(logits) {
        if t == PAD_TOKEN {
            continue;
        }
        best = match best {
            Some((bz, bt)) if bz > z || (bz == z && bt < t) => Some((bz, bt)),
            _ => Some((z, t)),
        };
    }
    best.map(|(_, t)| t).unwrap_or(PAD_TOKEN)
}

/// One draw from `softmax(z / temperature)` over the unmasked candidates.
fn sample_candidate<R: Rng + ?Sized>(
    ids: &[u32],
    logits: &[f64],
    temperature: f32,
    rng: &mut R,
) -> u32 {
    let inv = 1.0 / temperature as f64;
    let max = logits
        .iter()
        .copied()
        .filter(|z| z.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let weight = |z: f64| {
        if z.is_finite() {
            ((z - max) * inv).exp()
        } else {
            0.0
        }
    };
    let total: f64 = logits.iter().map(|&z| weight(z)).sum();
    let mut target = rng.random::<f64>() * total;
    let mut last = PAD_TOKEN;
    for (&t, &z) in ids.iter().zip(logits) {
        let w = weight(z);
        if w == 0.0 {
            continue;
        }
        last = t;
        if target < w {
            return t;
        }
        target -= w;
    }
    last
}

fn check_hidden(h: &[f32], d: usize) -> Result<()> {
    if h.len() != d {
        return Err(Error::DimMismatch(format!(
            "hidden state has length {}, expected {d}",
            h.len()
        )));
    }
    Ok(())
}

/// Multiplication and active-weight counts for one decoded token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub dense_mults: u64,
    pub flash_mults: u64,
    /// `dense_mults / flash_mults`.
    pub ratio: f64,
    pub active_params_dense: u64,
    pub active_params_flash: u64,
}

/// Dense `v·d` versus two-stage `c·d + p·(v/c)·d`.
pub fn cost_model(v: u64, d: u64, c: u64, p: u64) -> Result<CostModel> {
    if v == 0 || d == 0 || c == 0 || p == 0 {
        return Err(Error::InvalidConfig(
            "v, d, c and p must be positive".into(),
        ));
    }
    if !v.is_multiple_of(c) {
        return Err(Error::InvalidConfig(format!("c={c} does not divide v={v}")));
    }
    if p > c {
        return Err(Error::InvalidConfig(format!("p={p} exceeds c={c}")));
    }
    let dense = v * d;
    let flash = c * d + p * (v / c) * d;
    Ok(CostModel {
        dense_mults: dense,
        flash_mults: flash,
        ratio: dense as f64 / flash as f64,
        active_params_dense: dense,
        active_params_flash: flash,
    })
}
