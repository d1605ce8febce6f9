use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use flashhead::Init;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    KmeansPlusPlus,
    Uniform,
}

impl From<InitMethod> for Init {
    fn from(m: InitMethod) -> Self {
        match m {
            InitMethod::KmeansPlusPlus => Init::KMeansPlusPlus,
            InitMethod::Uniform => Init::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Table,
}

/// Everything a command may need. Resolved as flag > config file > default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub embeddings: Option<PathBuf>,
    pub hidden: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub clusters: usize,
    pub probes: usize,
    pub mode: Mode,
    pub temperature: f64,
    pub seed: u64,
    pub balanced: bool,
    pub init: InitMethod,
    pub max_iterations: u32,
    pub restarts: u32,
    /// Stage-1 centroid quantization; unset keeps f32 centroids.
    pub bits: Option<u8>,
    pub group_size: usize,
    pub k: usize,
    /// Monte Carlo sample counts, one report row each.
    pub samples: Vec<u64>,
    pub query: usize,
    pub reps: usize,
    pub warmup: usize,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            embeddings: None,
            hidden: None,
            index: None,
            out: None,
            format: Format::Csv,
            clusters: 8016,
            probes: 512,
            mode: Mode::Greedy,
            temperature: 1.0,
            seed: 0,
            balanced: true,
            init: InitMethod::KmeansPlusPlus,
            max_iterations: 1000,
            restarts: 1,
            bits: None,
            group_size: 64,
            k: 1,
            samples: vec![10_000],
            query: 0,
            reps: 30,
            warmup: 10,
            threads: None,
        }
    }
}

/// Flags shared by the model-facing commands. Every field is optional so an
/// absent flag falls through to the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Output-embedding matrix (rank-2 tensor file)
    #[arg(long, short = 'e')]
    pub embeddings: Option<PathBuf>,
    /// Hidden-state batch (rank-2 tensor file)
    #[arg(long)]
    pub hidden: Option<PathBuf>,
    /// Index file
    #[arg(long, short = 'i')]
    pub index: Option<PathBuf>,
    /// Output path; reports go to stdout when unset
    #[arg(long, short = 'o')]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Number of clusters
    #[arg(long = "c", visible_alias = "clusters")]
    pub clusters: Option<usize>,
    /// Number of probe clusters
    #[arg(long = "p", visible_alias = "probes")]
    pub probes: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Sampling temperature
    #[arg(long, visible_alias = "tau")]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Build with natural cluster sizes (padded C2T)
    #[arg(long)]
    pub unbalanced: bool,
    #[arg(long, value_enum)]
    pub init: Option<InitMethod>,
    #[arg(long)]
    pub max_iterations: Option<u32>,
    #[arg(long)]
    pub restarts: Option<u32>,
    /// Quantize stage-1 centroids to 4 or 8 bits
    #[arg(long)]
    pub bits: Option<u8>,
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Containment depth
    #[arg(long)]
    pub k: Option<usize>,
    /// Monte Carlo sample counts
    #[arg(long = "n", visible_alias = "samples", value_delimiter = ',')]
    pub samples: Option<Vec<u64>>,
    /// Row of the hidden batch used by mc-eval
    #[arg(long)]
    pub query: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &o.$field {
                    self.$field = v.clone().into();
                })*
            };
        }
        take!(embeddings, hidden, index, out);
        take!(
            format,
            clusters,
            probes,
            mode,
            temperature,
            seed,
            init,
            max_iterations,
            restarts
        );
        take!(group_size, k, samples, query, reps, warmup);
        if o.bits.is_some() {
            self.bits = o.bits;
        }
        if o.unbalanced {
            self.balanced = false;
        }
    }

    /// Checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            bail!("c must be at least 1");
        }
        if self.probes == 0 {
            bail!("p must be at least 1");
        }
        if self.mode == Mode::Sample && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bail!(
                "temperature must be positive and finite in sample mode, got {}",
                self.temperature
            );
        }
        if let Some(bits) = self.bits {
            if bits != 4 && bits != 8 {
                bail!("bits must be 4 or 8, got {bits}");
            }
        }
        if self.group_size == 0 {
            bail!("group size must be at least 1");
        }
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if self.samples.is_empty() || self.samples.contains(&0) {
            bail!("sample counts must be positive");
        }
        if self.max_iterations == 0 || self.restarts == 0 {
            bail!("max iterations and restarts must be at least 1");
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        Ok(())
    }

    /// `p ≤ c` against the cluster count in force: the index's when one is
    /// loaded, the configured `c` otherwise.
    pub fn validate_probes(&self, clusters: usize) -> Result<()> {
        if self.probes > clusters {
            bail!("p = {} exceeds c = {clusters}", self.probes);
        }
        Ok(())
    }

    pub fn validate_bench(&self) -> Result<()> {
        flashhead::evalbench::check_protocol(self.reps, self.warmup)?;
        Ok(())
    }

    pub fn cluster_options(&self) -> flashhead::ClusterOptions {
        flashhead::ClusterOptions {
            clusters: self.clusters,
            max_iterations: self.max_iterations,
            seed: self.seed,
            balanced: self.balanced,
            init: self.init.into(),
            restarts: self.restarts,
            ..flashhead::ClusterOptions::new(self.clusters)
        }
    }

    pub fn decode_config(&self, probes: usize) -> flashhead::DecodeConfig {
        match self.mode {
            Mode::Greedy => flashhead::DecodeConfig::greedy(probes),
            Mode::Sample => {
                flashhead::DecodeConfig::sample(probes, self.temperature as f32, self.seed)
            }
        }
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        path.as_deref()
            .with_context(|| format!("missing --{flag} (or `{flag}` in the config file)"))
    }
}
