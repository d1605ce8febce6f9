//! Seeded synthetic embeddings, hidden states and partitions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrix::{HiddenBatch, Matrix};

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * scale)
        .collect()
}

/// `v × d` matrix with i.i.d. `N(0, 1/d)` entries.
pub fn gaussian_embeddings(v: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = normal_vec(&mut rng, v * d, 1.0 / (d as f32).sqrt());
    Matrix::new(v, d, data).expect("positive dims")
}

/// Embeddings scattered around `topics` random directions: each token is its
/// topic direction plus isotropic noise of relative size `spread`, with a
/// per-token norm drawn from `[0.5, 1.5)`.
pub fn clustered_embeddings(v: usize, d: usize, topics: usize, spread: f32, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = 1.0 / (d as f32).sqrt();
    let centers: Vec<Vec<f32>> = (0..topics).map(|_| normal_vec(&mut rng, d, unit)).collect();
    let mut data = Vec::with_capacity(v * d);
    for _ in 0..v {
        let center = &centers[rng.random_range(0..topics)];
        let norm = rng.random_range(0.5f32..1.5);
        for &x in center {
            let noise: f32 = rng.sample(StandardNormal);
            data.push((x + spread * unit * noise) * norm);
        }
    }
    Matrix::new(v, d, data).expect("positive dims")
}

/// `n` hidden states with i.i.d. standard normal entries.
pub fn unit_normal_queries(n: usize, d: usize, seed: u64) -> HiddenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HiddenBatch::new(Matrix::new(n, d, normal_vec(&mut rng, n * d, 1.0)).expect("positive dims"))
}

/// Hidden states on segments between two random token embeddings,
/// `h = (1 − α)·e_i + α·e_j` with `α ~ U[0, 1)`, scaled by `gain`. These sit
/// near cluster boundaries.
pub fn hard_queries(e: &Matrix, n: usize, gain: f32, seed: u64) -> HiddenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * e.cols());
    for _ in 0..n {
        let i = rng.random_range(0..e.rows());
        let j = rng.random_range(0..e.rows());
        let a: f32 = rng.random();
        data.extend(
            e.row(i)
                .iter()
                .zip(e.row(j))
                .map(|(&x, &y)| gain * ((1.0 - a) * x + a * y)),
        );
    }
    HiddenBatch::new(Matrix::new(n, e.cols(), data).expect("positive dims"))
}

/// Uniformly random assignment of `v` tokens to `c` clusters of `v / c` each.
pub fn random_balanced_assignment(v: usize, c: usize, seed: u64) -> Vec<u32> {
    assert!(c > 0 && v.is_multiple_of(c), "c must divide v");
    let b = v / c;
    let mut assignment: Vec<u32> = (0..v).map(|t| (t / b) as u32).collect();
    assignment.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    assignment
}

/// Eight unit vectors at angles `k · 45°`.
pub fn eight_directions() -> Matrix {
    let rows: Vec<[f32; 2]> = (0..8)
        .map(|k| {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            [a.cos() as f32, a.sin() as f32]
        })
        .collect();
    Matrix::from_rows(&rows).expect("fixed shape")
}
