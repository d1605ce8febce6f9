//! Browser demo: cluster a 2-D toy vocabulary, watch a query probe it, and
//! compare the sampled marginal with its exact value.

use flashhead::mc::{exact_marginal, l1_distance, mc_marginal};
use flashhead::{
    normalize_rows, spherical_kmeans, ClusterOptions, ClusteredIndex, DecodeConfig, FlashHead,
    Matrix,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

// Errors cross into JS as plain strings so the same methods run natively.
fn js_err(e: flashhead::Error) -> String {
    e.to_string()
}

/// `v` tokens spread around the unit circle with a little radial and
/// angular jitter, so the clusters are arcs.
fn ring(v: usize, seed: u64) -> Matrix {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<[f32; 2]> = (0..v)
        .map(|i| {
            let a = (i as f32 + rng.random_range(-0.4..0.4)) * std::f32::consts::TAU / v as f32;
            let r = rng.random_range(0.7f32..1.3);
            [r * a.cos(), r * a.sin()]
        })
        .collect();
    Matrix::from_rows(&rows).expect("fixed width")
}

#[wasm_bindgen]
pub struct Demo {
    embeddings: Matrix,
    index: ClusteredIndex,
}

#[wasm_bindgen]
impl Demo {
    /// Builds the toy vocabulary and its index. `clusters` must divide
    /// `tokens` when `balanced` is set.
    #[wasm_bindgen(constructor)]
    pub fn new(tokens: usize, clusters: usize, balanced: bool, seed: u32) -> Result<Demo, String> {
        if tokens == 0 || tokens > 4096 {
            return Err("tokens must be in 1..=4096".to_string());
        }
        let embeddings = ring(tokens, seed as u64);
        let unit = normalize_rows(&embeddings).map_err(js_err)?;
        let opts = ClusterOptions {
            balanced,
            seed: seed as u64,
            max_iterations: 100,
            restarts: 4,
            ..ClusterOptions::new(clusters)
        };
        let index = spherical_kmeans(&unit, &opts).map_err(js_err)?;
        Ok(Demo { embeddings, index })
    }

    pub fn tokens(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn clusters(&self) -> usize {
        self.index.clusters()
    }

    /// Widest C2T row; equals `tokens / clusters` for a balanced build.
    pub fn cluster_size(&self) -> usize {
        self.index.cluster_size()
    }

    /// Interleaved `x, y` per token.
    pub fn points(&self) -> Vec<f32> {
        self.embeddings.as_slice().to_vec()
    }

    /// Interleaved `x, y` per centroid.
    pub fn centroids(&self) -> Vec<f32> {
        self.index.centroids().as_slice().to_vec()
    }

    pub fn assignment(&self) -> Vec<u32> {
        self.index.assignment()
    }

    pub fn sizes(&self) -> Vec<u32> {
        self.index
            .cluster_sizes()
            .into_iter()
            .map(|s| s as u32)
            .collect()
    }

    /// Decodes the query `gain · (cos θ, sin θ)` and returns
    /// `[token, dense argmax, probe ids…]`.
    pub fn decode(
        &self,
        angle: f32,
        gain: f32,
        probes: usize,
        temperature: f32,
        seed: u32,
    ) -> Result<Vec<u32>, String> {
        let h = [gain * angle.cos(), gain * angle.sin()];
        let cfg = if temperature > 0.0 {
            DecodeConfig::sample(probes, temperature, seed as u64)
        } else {
            DecodeConfig::greedy(probes)
        };
        let head = FlashHead::new(&self.index, &self.embeddings).map_err(js_err)?;
        let trace = head
            .decode_traced(&h, &cfg, &mut ChaCha8Rng::seed_from_u64(seed as u64))
            .map_err(js_err)?;
        let dense =
            flashhead::evalbench::dense_head_oracle(&self.embeddings, &h, 1).map_err(js_err)?[0];
        let mut out = vec![trace.token, dense];
        out.extend(trace.probes);
        Ok(out)
    }

    /// Token marginal under probe sampling: `v` Monte Carlo values from
    /// `samples` draws, then `v` exact values, then their L1 distance. The
    /// exact half is empty when there are too many probe subsets.
    pub fn marginal(
        &self,
        angle: f32,
        gain: f32,
        probes: usize,
        temperature: f64,
        samples: u32,
        seed: u32,
    ) -> Result<Vec<f64>, String> {
        let h = [gain * angle.cos(), gain * angle.sin()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let est = mc_marginal(
            &self.index,
            &self.embeddings,
            &h,
            probes,
            temperature,
            samples as u64,
            &mut rng,
        )
        .map_err(js_err)?;
        let mut out = est.probs.clone();
        match exact_marginal(&self.index, &self.embeddings, &h, probes, temperature) {
            Ok(exact) => {
                let l1 = l1_distance(&est.probs, &exact.probs);
                out.extend(exact.probs);
                out.push(l1);
            }
            Err(flashhead::Error::TooManySubsets { .. }) => out.push(f64::NAN),
            Err(e) => return Err(js_err(e)),
        }
        Ok(out)
    }
}
