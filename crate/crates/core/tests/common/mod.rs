#![allow(dead_code)]

use flashhead::clustering::BuildMeta;
use flashhead::synth::{eight_directions, gaussian_embeddings, random_balanced_assignment};
use flashhead::{normalize_rows_lossy, ClusteredIndex, Matrix};

/// Eight unit vectors at k·45° with the adjacent-pair index
/// {0,1} {2,3} {4,5} {6,7} (centroids at 22.5°, 112.5°, 202.5°, 292.5°).
pub fn f8() -> (Matrix, ClusteredIndex) {
    let e = eight_directions();
    let index =
        ClusteredIndex::from_partition(&e, &[0, 0, 1, 1, 2, 2, 3, 3], 4, BuildMeta::default())
            .unwrap();
    (e, index)
}

/// Random `v × d` embeddings with a random balanced partition into `c` clusters.
pub fn random_instance(v: usize, d: usize, c: usize, seed: u64) -> (Matrix, ClusteredIndex) {
    let e = gaussian_embeddings(v, d, seed);
    let (unit, _) = normalize_rows_lossy(&e);
    let assignment = random_balanced_assignment(v, c, seed ^ 0x5eed);
    let index =
        ClusteredIndex::from_partition(&unit, &assignment, c, BuildMeta::default()).unwrap();
    (e, index)
}

/// Reference logits `E·h` in f64.
pub fn logits_f64(e: &Matrix, h: &[f32]) -> Vec<f64> {
    e.iter_rows()
        .map(|r| r.iter().zip(h).map(|(&a, &b)| a as f64 * b as f64).sum())
        .collect()
}

/// Reference softmax in f64 with the max subtracted.
pub fn softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = x.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// Index of the largest value by a plain scan, lowest index on ties.
pub fn scan_argmax(x: &[f32]) -> u32 {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best as u32
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
