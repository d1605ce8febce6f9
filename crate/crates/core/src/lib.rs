//! Two-stage clustered retrieval head for large-vocabulary language models.
//!
//! The output-embedding matrix `E` (`v × d`) is partitioned offline into `c`
//! equal-size clusters by balanced spherical k-means. At decode time the head
//! scores the `c` centroids, keeps `p` probe clusters and scores only their
//! `p · v / c` tokens, replacing the `v·d` dense product with `c·d + p·(v/c)·d`
//! multiplications.
//!
//! ```
//! use flashhead::{spherical_kmeans, normalize_rows, ClusterOptions, DecodeConfig, FlashHead};
//! use flashhead::synth::gaussian_embeddings;
//! use rand::SeedableRng;
//!
//! let e = gaussian_embeddings(256, 16, 1);
//! let index = spherical_kmeans(&normalize_rows(&e)?, &ClusterOptions::new(16))?;
//! let head = FlashHead::new(&index, &e)?;
//! let h = vec![0.1f32; 16];
//! let token = head.decode(&h, &DecodeConfig::greedy(4), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
//! assert!(token < 256);
//! # Ok::<(), flashhead::Error>(())
//! ```

pub mod clustering;
pub mod error;
pub mod evalbench;
pub mod head;
pub mod matrix;
pub mod mc;
pub mod quant;
pub mod synth;
pub mod tensor_io;

pub use clustering::{
    balance_assignment, clustering_objective, normalize_rows, normalize_rows_lossy,
    spherical_kmeans, ClusterOptions, ClusteredIndex, Init, PAD_TOKEN,
};
pub use error::{Error, Result};
pub use head::{cost_model, decode, CostModel, DecodeConfig, DecodeMode, FlashHead};
pub use matrix::{EmbeddingMatrix, HiddenBatch, Matrix};
pub use mc::MarginalEstimate;
pub use quant::{quantize_centroids, QuantizedCentroids};
