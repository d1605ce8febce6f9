//! Balanced spherical k-means over token embeddings.
//!
//! The build alternates an assignment step (every token goes to its most
//! cosine-similar centroid, then overfull clusters shed their least similar
//! members greedily) with a centroid step (normalised member mean). The
//! result is a [`ClusteredIndex`]: the unit centroid matrix plus the dense
//! cluster-to-token table consumed by the retrieval head.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{dot, dot_f64, l2_norm, matmul_transposed, rank_cmp, Matrix};

/// Sentinel filling the tail of short rows in an unbalanced index.
pub const PAD_TOKEN: u32 = u32::MAX;

const UNIT_TOLERANCE: f64 = 1e-5;
/// Ranked candidates kept per token for the balancing pass.
const PREFERENCE_WIDTH: usize = 32;
const BLOCK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// k-means++ seeding under cosine distance.
    #[default]
    KMeansPlusPlus,
    /// `c` distinct tokens drawn uniformly.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOptions {
    pub clusters: usize,
    pub max_iterations: u32,
    pub seed: u64,
    pub balanced: bool,
    /// Relative objective change below which the build stops early.
    pub tolerance: f64,
    pub init: Init,
    /// Independent runs from different initialisations; the run with the
    /// lowest final objective is kept.
    pub restarts: u32,
}

impl ClusterOptions {
    pub fn new(clusters: usize) -> Self {
        Self {
            clusters,
            max_iterations: 1000,
            seed: 0,
            balanced: true,
            tolerance: 1e-6,
            init: Init::KMeansPlusPlus,
            restarts: 1,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::InvalidOptions(
                "cluster count must be at least 1".into(),
            ));
        }
        if self.clusters > vocab {
            return Err(Error::InvalidOptions(format!(
                "{} clusters requested for a vocabulary of {vocab}",
                self.clusters
            )));
        }
        if self.balanced && !vocab.is_multiple_of(self.clusters) {
            return Err(Error::InvalidOptions(format!(
                "balanced clustering needs c | v, but {} does not divide {vocab}",
                self.clusters
            )));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidOptions("restarts must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidOptions(
                "max_iterations must be positive".into(),
            ));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::InvalidOptions(
                "tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuildMeta {
    pub seed: u64,
    pub iterations: u32,
    /// Objective after each iteration's centroid update.
    pub objective_trace: Vec<f64>,
}

/// Centroid matrix `C` (`c × d`, unit rows) and the dense cluster-to-token map
/// `C2T` (`c × b`).
///
/// In a balanced index every row of `C2T` holds exactly `b = v / c` distinct
/// tokens and the rows partition the vocabulary. An unbalanced index is as
/// wide as its largest cluster; shorter rows are filled with [`PAD_TOKEN`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredIndex {
    vocab: usize,
    cluster_size: usize,
    centroids: Matrix,
    c2t: Vec<u32>,
    balanced: bool,
    pub meta: BuildMeta,
}

impl ClusteredIndex {
    /// Assembles an index and checks every structural invariant.
    pub fn from_parts(
        vocab: usize,
        centroids: Matrix,
        c2t: Vec<u32>,
        cluster_size: usize,
        meta: BuildMeta,
    ) -> Result<Self> {
        let c = centroids.rows();
        if cluster_size == 0 || c2t.len() != c * cluster_size {
            return Err(Error::Invariant(format!(
                "C2T has {} entries, expected {c}×{cluster_size}",
                c2t.len()
            )));
        }
        let has_pad = c2t.contains(&PAD_TOKEN);
        let balanced = !has_pad && c * cluster_size == vocab;
        let index = Self {
            vocab,
            cluster_size,
            centroids,
            c2t,
            balanced,
            meta,
        };
        index.validate()?;
        Ok(index)
    }

    /// Builds an index from a token→cluster assignment, using the normalised
    /// mean of each cluster's (unit) member embeddings as its centroid.
    pub fn from_partition(
        e_unit: &Matrix,
        assignment: &[u32],
        clusters: usize,
        meta: BuildMeta,
    ) -> Result<Self> {
        if assignment.len() != e_unit.rows() {
            return Err(Error::DimMismatch(format!(
                "assignment covers {} tokens, matrix has {}",
                assignment.len(),
                e_unit.rows()
            )));
        }
        if let Some(&bad) = assignment.iter().find(|&&k| k as usize >= clusters) {
            return Err(Error::Invariant(format!("cluster id {bad} out of range")));
        }
        let mut centroids = Matrix::zeros(clusters, e_unit.cols());
        let counts = update_centroids(e_unit, assignment, &mut centroids);
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Invariant(format!("cluster {k} has no members")));
        }
        let (c2t, b) = build_c2t(assignment, clusters);
        Self::from_parts(e_unit.rows(), centroids, c2t, b, meta)
    }

    pub fn clusters(&self) -> usize {
        self.centroids.rows()
    }

    /// Row width `b` of `C2T` (the largest cluster when unbalanced).
    pub fn cluster_size(&self) -> usize {
        self.cluster_size
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn is_balanced(&self) -> bool {
        self.balanced
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn c2t(&self) -> &[u32] {
        &self.c2t
    }

    /// Row `k` of `C2T`, pads included.
    #[inline]
    pub fn cluster_row(&self, k: usize) -> &[u32] {
        &self.c2t[k * self.cluster_size..(k + 1) * self.cluster_size]
    }

    pub fn cluster_members(&self, k: usize) -> impl Iterator<Item = u32> + '_ {
        self.cluster_row(k)
            .iter()
            .copied()
            .filter(|&t| t != PAD_TOKEN)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        (0..self.clusters())
            .map(|k| self.cluster_members(k).count())
            .collect()
    }

    /// Token → cluster map recovered from `C2T`.
    pub fn assignment(&self) -> Vec<u32> {
        let mut out = vec![PAD_TOKEN; self.vocab];
        for k in 0..self.clusters() {
            for t in self.cluster_members(k) {
                out[t as usize] = k as u32;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.clusters();
        if c == 0 {
            return Err(Error::Invariant("index has no clusters".into()));
        }
        if let Some(row) = self.centroids.first_non_finite_row() {
            return Err(Error::NonFiniteValue { row });
        }
        for (k, row) in self.centroids.iter_rows().enumerate() {
            let n = l2_norm(row);
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Invariant(format!("centroid {k} has norm {n}")));
            }
        }
        let mut seen = vec![false; self.vocab];
        for (k, row) in self.c2t.chunks_exact(self.cluster_size).enumerate() {
            for &t in row {
                if t == PAD_TOKEN {
                    if self.balanced {
                        return Err(Error::Invariant(format!("pad entry in balanced row {k}")));
                    }
                    continue;
                }
                let t = t as usize;
                if t >= self.vocab {
                    return Err(Error::Invariant(format!(
                        "token {t} in row {k} outside vocabulary of {}",
                        self.vocab
                    )));
                }
                if std::mem::replace(&mut seen[t], true) {
                    return Err(Error::Invariant(format!("token {t} appears twice")));
                }
            }
        }
        if let Some(t) = seen.iter().position(|s| !s) {
            return Err(Error::Invariant(format!("token {t} is not covered")));
        }
        Ok(())
    }
}

/// Divides every row by its L2 norm.
pub fn normalize_rows(e: &Matrix) -> Result<Matrix> {
    let mut out = e.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = l2_norm(row);
        if n == 0.0 {
            return Err(Error::ZeroNormRow(i));
        }
        row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
    Ok(out)
}

/// Like [`normalize_rows`], but substitutes the basis vector `e_1` for zero
/// rows and reports their indices. Only the clustering input is affected;
/// stage-2 scoring always reads the original embeddings.
pub fn normalize_rows_lossy(e: &Matrix) -> (Matrix, Vec<usize>) {
    let mut out = e.clone();
    let mut zero_rows = Vec::new();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = l2_norm(row);
        if n == 0.0 {
            row.fill(0.0);
            row[0] = 1.0;
            zero_rows.push(i);
        } else {
            row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        }
    }
    (out, zero_rows)
}

/// `Σ_k Σ_{i∈C_k} (1 − e_i·c_k)`, accumulated in `f64`.
pub fn clustering_objective(e_unit: &Matrix, index: &ClusteredIndex) -> f64 {
    let mut total = 0.0f64;
    for k in 0..index.clusters() {
        let centroid = index.centroids().row(k);
        for t in index.cluster_members(k) {
            total += 1.0 - dot_f64(e_unit.row(t as usize), centroid);
        }
    }
    total
}

/// Ranked cluster preferences per token, highest similarity first (ties by
/// lower cluster id).
///
/// Either the full `v × c` ranking or a truncated top list per token; a
/// truncated list falls back to recomputing the token's full ranking when
/// every listed cluster is already full.
#[derive(Debug, Clone)]
pub struct Preferences<'a> {
    clusters: usize,
    width: usize,
    ids: Vec<u32>,
    sims: Vec<f32>,
    exact: Option<(&'a Matrix, &'a Matrix)>,
}

impl Preferences<'static> {
    /// Full rankings from a dense row-major `tokens × clusters` similarity matrix.
    pub fn from_dense(similarities: &[f32], tokens: usize, clusters: usize) -> Self {
        assert_eq!(similarities.len(), tokens * clusters);
        let mut ids = Vec::with_capacity(tokens * clusters);
        let mut sims = Vec::with_capacity(tokens * clusters);
        for row in similarities.chunks_exact(clusters) {
            let mut order: Vec<u32> = (0..clusters as u32).collect();
            order.sort_unstable_by(|&a, &b| rank_cmp((row[a as usize], a), (row[b as usize], b)));
            sims.extend(order.iter().map(|&k| row[k as usize]));
            ids.extend(order);
        }
        Self {
            clusters,
            width: clusters,
            ids,
            sims,
            exact: None,
        }
    }
}

impl<'a> Preferences<'a> {
    pub fn tokens(&self) -> usize {
        self.ids.len() / self.width
    }

    fn listed(&self, token: usize) -> impl Iterator<Item = (u32, f32)> + '_ {
        let span = token * self.width..(token + 1) * self.width;
        self.ids[span.clone()]
            .iter()
            .copied()
            .zip(self.sims[span].iter().copied())
    }

    fn is_complete(&self) -> bool {
        self.width == self.clusters
    }

    fn full_ranking(&self, token: usize) -> Vec<(u32, f32)> {
        if self.is_complete() {
            return self.listed(token).collect();
        }
        let (e_unit, centroids) = self
            .exact
            .expect("truncated preferences always carry the embedding source");
        let e = e_unit.row(token);
        let mut all: Vec<(u32, f32)> = (0..self.clusters)
            .map(|k| (k as u32, dot(e, centroids.row(k))))
            .collect();
        all.sort_unstable_by(|a, b| rank_cmp((a.1, a.0), (b.1, b.0)));
        all
    }

    /// Similarity of `token` to `cluster`.
    pub fn similarity(&self, token: usize, cluster: u32) -> f32 {
        if let Some((_, s)) = self.listed(token).find(|&(k, _)| k == cluster) {
            return s;
        }
        match self.exact {
            Some((e_unit, centroids)) => dot(e_unit.row(token), centroids.row(cluster as usize)),
            None => unreachable!("complete preferences list every cluster"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub token: u32,
    pub from: u32,
    pub to: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceOutcome {
    pub assignment: Vec<u32>,
    /// Reassignments in the order they were made.
    pub moves: Vec<Move>,
}

/// Greedy capacity repair of a token → cluster assignment.
///
/// Every cluster above `capacity` evicts its lowest-similarity members (lower
/// token id first on ties). Evicted tokens are then placed, least similar to
/// their old centroid first, into the most similar cluster that still has a
/// free slot. Tokens of clusters within capacity never move.
///
/// Panics if `capacity · c != v`.
pub fn balance_assignment(
    assignment: &[u32],
    prefs: &Preferences<'_>,
    capacity: usize,
) -> BalanceOutcome {
    let clusters = prefs.clusters;
    assert_eq!(
        capacity * clusters,
        assignment.len(),
        "capacity × clusters must equal the vocabulary size"
    );
    assert_eq!(prefs.tokens(), assignment.len());

    let mut members: Vec<Vec<u32>> = vec![Vec::new(); clusters];
    for (t, &k) in assignment.iter().enumerate() {
        members[k as usize].push(t as u32);
    }

    let mut load = vec![0usize; clusters];
    let mut evicted: Vec<(f32, u32, u32)> = Vec::new();
    for (k, list) in members.iter_mut().enumerate() {
        if list.len() > capacity {
            let mut scored: Vec<(f32, u32)> = list
                .iter()
                .map(|&t| (prefs.similarity(t as usize, k as u32), t))
                .collect();
            // least similar first
            scored.sort_unstable_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            let excess = list.len() - capacity;
            evicted.extend(scored[..excess].iter().map(|&(s, t)| (s, t, k as u32)));
        }
        load[k] = list.len().min(capacity);
    }
    evicted.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });

    let mut out = assignment.to_vec();
    let mut moves = Vec::with_capacity(evicted.len());
    for &(_, token, from) in &evicted {
        let t = token as usize;
        let mut target = prefs
            .listed(t)
            .map(|(k, _)| k)
            .find(|&k| load[k as usize] < capacity);
        if target.is_none() {
            target = prefs
                .full_ranking(t)
                .into_iter()
                .map(|(k, _)| k)
                .find(|&k| load[k as usize] < capacity);
        }
        let to = target.expect("a free slot exists whenever capacity · c = v");
        load[to as usize] += 1;
        out[t] = to;
        moves.push(Move { token, from, to });
    }
    BalanceOutcome {
        assignment: out,
        moves,
    }
}

/// Spherical k-means on unit-norm rows, optionally with equal-size clusters.
///
/// Restart `r` draws its initialisation from stream `r` of a ChaCha generator
/// seeded with `opts.seed`.
pub fn spherical_kmeans(e_unit: &Matrix, opts: &ClusterOptions) -> Result<ClusteredIndex> {
    opts.validate(e_unit.rows())?;
    if let Some(row) = e_unit.first_non_finite_row() {
        return Err(Error::NonFiniteValue { row });
    }
    let mut best: Option<Run> = None;
    for r in 0..opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(r as u64);
        let run = lloyd(e_unit, opts, &mut rng);
        if best
            .as_ref()
            .is_none_or(|b| run.objective() < b.objective())
        {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");
    let (c2t, b) = build_c2t(&run.assignment, opts.clusters);
    ClusteredIndex::from_parts(
        e_unit.rows(),
        run.centroids,
        c2t,
        b,
        BuildMeta {
            seed: opts.seed,
            iterations: run.iterations,
            objective_trace: run.trace,
        },
    )
}

struct Run {
    assignment: Vec<u32>,
    centroids: Matrix,
    trace: Vec<f64>,
    iterations: u32,
}

impl Run {
    fn objective(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::INFINITY)
    }
}

fn lloyd(e_unit: &Matrix, opts: &ClusterOptions, rng: &mut ChaCha8Rng) -> Run {
    let v = e_unit.rows();
    let c = opts.clusters;
    let mut centroids = match opts.init {
        Init::KMeansPlusPlus => kmeans_plus_plus(e_unit, c, rng),
        Init::Uniform => uniform_init(e_unit, c, rng),
    };

    let width = if opts.balanced {
        PREFERENCE_WIDTH.min(c)
    } else {
        1
    };
    let capacity = v / c;
    let mut assignment = vec![0u32; v];
    let mut trace = Vec::new();
    let mut previous: Option<f64> = None;
    let mut iterations = 0;

    for _ in 0..opts.max_iterations {
        iterations += 1;
        let scored = score_tokens(e_unit, &centroids, width);
        assignment = if opts.balanced {
            let prefs = Preferences {
                clusters: c,
                width,
                ids: scored.ids,
                sims: scored.sims,
                exact: Some((e_unit, &centroids)),
            };
            let first: Vec<u32> = (0..v).map(|t| prefs.ids[t * width]).collect();
            balance_assignment(&first, &prefs, capacity).assignment
        } else {
            scored.ids
        };

        let counts = update_centroids(e_unit, &assignment, &mut centroids);
        if counts.contains(&0) {
            reseed_empty(e_unit, &assignment, &counts, &mut centroids);
        }
        debug_assert!(centroids
            .iter_rows()
            .all(|r| (l2_norm(r) - 1.0).abs() < UNIT_TOLERANCE));

        let objective = partition_objective(e_unit, &assignment, &centroids);
        trace.push(objective);
        if let Some(prev) = previous {
            let delta = (prev - objective).abs();
            if delta == 0.0 || delta < opts.tolerance * prev.abs() {
                break;
            }
        }
        previous = Some(objective);
    }
    Run {
        assignment,
        centroids,
        trace,
        iterations,
    }
}

struct Scored {
    ids: Vec<u32>,
    sims: Vec<f32>,
}

/// Ranks the top `width` centroids for every token, highest cosine first.
fn score_tokens(e_unit: &Matrix, centroids: &Matrix, width: usize) -> Scored {
    let v = e_unit.rows();
    let c = centroids.rows();
    let d = e_unit.cols();
    let mut ids = vec![0u32; v * width];
    let mut sims = vec![0.0f32; v * width];

    let work = |(block, (id_chunk, sim_chunk)): (usize, (&mut [u32], &mut [f32]))| {
        let start = block * BLOCK_ROWS;
        let m = id_chunk.len() / width;
        let a = &e_unit.as_slice()[start * d..(start + m) * d];
        let mut scores = vec![0.0f32; m * c];
        matmul_transposed(a, centroids.as_slice(), m, d, c, &mut scores);
        for (r, row) in scores.chunks_exact(c).enumerate() {
            let ids = &mut id_chunk[r * width..(r + 1) * width];
            let sims = &mut sim_chunk[r * width..(r + 1) * width];
            top_list(row, ids, sims);
        }
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ids.par_chunks_mut(BLOCK_ROWS * width)
            .zip(sims.par_chunks_mut(BLOCK_ROWS * width))
            .enumerate()
            .for_each(work);
    }
    #[cfg(not(feature = "parallel"))]
    ids.chunks_mut(BLOCK_ROWS * width)
        .zip(sims.chunks_mut(BLOCK_ROWS * width))
        .enumerate()
        .for_each(work);

    Scored { ids, sims }
}

/// Fills `ids`/`sims` with the `ids.len()` best entries of `row`.
fn top_list(row: &[f32], ids: &mut [u32], sims: &mut [f32]) {
    let width = ids.len();
    let mut filled = 0;
    for (k, &s) in row.iter().enumerate() {
        if filled == width && s <= sims[width - 1] {
            continue;
        }
        // scanning in id order with strict comparisons keeps lower ids first on ties
        let mut pos = filled.min(width - 1);
        if filled < width {
            filled += 1;
        }
        while pos > 0 && s > sims[pos - 1] {
            sims[pos] = sims[pos - 1];
            ids[pos] = ids[pos - 1];
            pos -= 1;
        }
        sims[pos] = s;
        ids[pos] = k as u32;
    }
}

/// Recomputes unit centroids from the assignment; returns member counts.
/// Empty clusters keep their previous centroid.
fn update_centroids(e_unit: &Matrix, assignment: &[u32], centroids: &mut Matrix) -> Vec<usize> {
    let c = centroids.rows();
    let d = centroids.cols();
    let mut sums = vec![0.0f64; c * d];
    let mut counts = vec![0usize; c];
    for (t, &k) in assignment.iter().enumerate() {
        let k = k as usize;
        counts[k] += 1;
        let acc = &mut sums[k * d..(k + 1) * d];
        for (a, &x) in acc.iter_mut().zip(e_unit.row(t)) {
            *a += x as f64;
        }
    }
    for k in 0..c {
        if counts[k] == 0 {
            continue;
        }
        let acc = &sums[k * d..(k + 1) * d];
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        let row = centroids.row_mut(k);
        if norm == 0.0 {
            // antipodal members cancel out; keep a deterministic direction
            row.fill(0.0);
            row[0] = 1.0;
        } else {
            for (dst, &s) in row.iter_mut().zip(acc) {
                *dst = (s / norm) as f32;
            }
        }
    }
    counts
}

/// Moves each empty centroid onto the worst-assigned token still unused.
fn reseed_empty(e_unit: &Matrix, assignment: &[u32], counts: &[usize], centroids: &mut Matrix) {
    let mut worst: Vec<(f64, u32)> = assignment
        .iter()
        .enumerate()
        .map(|(t, &k)| (dot_f64(e_unit.row(t), centroids.row(k as usize)), t as u32))
        .collect();
    worst.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut next = worst.into_iter();
    for (k, _) in counts.iter().enumerate().filter(|(_, &n)| n == 0) {
        if let Some((_, t)) = next.next() {
            let src = e_unit.row(t as usize).to_vec();
            centroids.row_mut(k).copy_from_slice(&src);
        }
    }
}

fn partition_objective(e_unit: &Matrix, assignment: &[u32], centroids: &Matrix) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(t, &k)| 1.0 - dot_f64(e_unit.row(t), centroids.row(k as usize)))
        .sum()
}

/// Row-per-cluster token table; rows sorted by token id, padded to the
/// largest cluster.
fn build_c2t(assignment: &[u32], clusters: usize) -> (Vec<u32>, usize) {
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); clusters];
    for (t, &k) in assignment.iter().enumerate() {
        rows[k as usize].push(t as u32);
    }
    let b = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut c2t = Vec::with_capacity(clusters * b);
    for row in rows {
        let pad = b - row.len();
        c2t.extend(row);
        c2t.extend(std::iter::repeat_n(PAD_TOKEN, pad));
    }
    (c2t, b)
}

fn uniform_init(e_unit: &Matrix, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let picks = sample_indices(rng, e_unit.rows(), c);
    let rows: Vec<&[f32]> = picks.iter().map(|t| e_unit.row(t)).collect();
    Matrix::from_rows(&rows).expect("sampled rows share the embedding width")
}

/// Greedy k-means++ seeding with `1 − cos` as the (squared-chord) distance:
/// each step draws `2 + ln c` candidates proportionally to their current
/// distance and keeps the one that lowers the total distance most.
fn kmeans_plus_plus(e_unit: &Matrix, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let v = e_unit.rows();
    let trials = 2 + (c as f64).ln() as usize;
    let distances = |centre: usize| -> Vec<f64> {
        let centre = e_unit.row(centre);
        e_unit
            .iter_rows()
            .map(|r| (1.0 - dot(r, centre) as f64).max(0.0))
            .collect()
    };
    let mut chosen = Vec::with_capacity(c);
    let mut taken = vec![false; v];
    let first = rng.random_range(0..v);
    chosen.push(first);
    taken[first] = true;
    let mut dist = distances(first);
    dist[first] = 0.0;

    while chosen.len() < c {
        let total: f64 = dist
            .iter()
            .zip(&taken)
            .filter(|(_, &t)| !t)
            .map(|(d, _)| d)
            .sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                draw_proportional(&dist, &taken, rng.random::<f64>() * total)
            } else {
                None
            };
            // duplicates everywhere: fall back to any unused token
            let pick = pick.unwrap_or_else(|| {
                let free: Vec<usize> = (0..v).filter(|&t| !taken[t]).collect();
                free[rng.random_range(0..free.len())]
            });
            let mut merged = distances(pick);
            for (m, &d) in merged.iter_mut().zip(&dist) {
                *m = m.min(d);
            }
            merged[pick] = 0.0;
            let potential: f64 = merged.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, merged));
            }
        }
        let (_, pick, merged) = best.expect("at least one trial");
        chosen.push(pick);
        taken[pick] = true;
        dist = merged;
    }
    let rows: Vec<&[f32]> = chosen.iter().map(|&t| e_unit.row(t)).collect();
    Matrix::from_rows(&rows).expect("seed rows share the embedding width")
}

fn draw_proportional(weights: &[f64], taken: &[bool], mut target: f64) -> Option<usize> {
    let mut pick = None;
    for (t, &w) in weights.iter().enumerate() {
        if w <= 0.0 || taken[t] {
            continue;
        }
        pick = Some(t);
        if target < w {
            break;
        }
        target -= w;
    }
    pick
}
