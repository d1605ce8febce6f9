//! `flashhead` command-line driver.
//!
//! Exit status: 0 on success, 1 when a `--gate` check fails, 2 on any error.

mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use flashhead::evalbench::{
    bench_tpot_head, containment_with, dense_head_oracle, sweep, LatencyStats,
};
use flashhead::mc::{clip_zeros, exact_marginal, l1_distance, mc_marginal};
use flashhead::synth::{
    clustered_embeddings, gaussian_embeddings, hard_queries, unit_normal_queries,
};
use flashhead::tensor_io::{
    load_embeddings, load_hidden, load_index_with_quantized, save_index, save_index_with_quantized,
    save_matrix,
};
use flashhead::{
    quantize_centroids, spherical_kmeans, ClusteredIndex, Error, FlashHead, Matrix,
    QuantizedCentroids,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{Overrides, RunConfig};
use report::Table;

#[derive(Debug, Parser)]
#[command(
    name = "flashhead",
    version,
    about = "Clustered two-stage vocabulary head"
)]
struct Cli {
    /// TOML file with RunConfig keys; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel evaluation
    #[arg(long, global = true, env = "FLASHHEAD_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a balanced (or padded) cluster index
    Cluster(Overrides),
    /// Decode one token per hidden-state row
    Decode {
        #[command(flatten)]
        o: Overrides,
        /// Print the dense-head argmax instead
        #[arg(long)]
        oracle: bool,
    },
    /// Top-k containment of the dense argmax
    Eval {
        #[command(flatten)]
        o: Overrides,
        /// Exit 1 unless full-probe runs contain every query and the
        /// fraction reaches --min-containment
        #[arg(long)]
        gate: bool,
        #[arg(long)]
        min_containment: Option<f64>,
    },
    /// Head-only latency against the dense head
    Bench {
        #[command(flatten)]
        o: Overrides,
        /// Exit 1 unless the median speedup reaches --min-speedup
        #[arg(long)]
        gate: bool,
        #[arg(long, default_value_t = 2.0)]
        min_speedup: f64,
    },
    /// Monte Carlo marginal against the exact marginal
    #[command(name = "mc-eval", alias = "mc")]
    McEval {
        #[command(flatten)]
        o: Overrides,
        /// Exit 1 unless the largest N is within L1 0.01 and every estimate
        /// sums to 1 within 1e-12
        #[arg(long)]
        gate: bool,
    },
    /// Containment and latency over a (c, p) grid
    Sweep {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, value_delimiter = ',', default_values_t = [4008usize, 8016, 16032])]
        grid_c: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [128usize, 256, 512])]
        grid_p: Vec<usize>,
        /// Exit 1 unless containment is non-decreasing in p for every c
        #[arg(long)]
        gate: bool,
    },
    /// Write a synthetic embedding matrix
    GenEmbeddings {
        #[arg(long)]
        v: usize,
        #[arg(long)]
        d: usize,
        /// Topic directions; 0 gives i.i.d. Gaussian rows
        #[arg(long, default_value_t = 0)]
        topics: usize,
        #[arg(long, default_value_t = 1.0)]
        spread: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'o')]
        out: PathBuf,
    },
    /// Write a synthetic hidden-state batch
    GenHidden {
        #[arg(long)]
        n: usize,
        /// Width; taken from --embeddings when given
        #[arg(long)]
        d: Option<usize>,
        /// Draw boundary queries between random embedding rows
        #[arg(long, short = 'e')]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 4.0)]
        gain: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'o')]
        out: PathBuf,
    },
    /// Print an index file's shape and build metadata
    DumpIndex {
        #[arg(long, short = 'i')]
        index: PathBuf,
    },
    /// Print the resolved configuration as TOML
    Config(Overrides),
}

enum Outcome {
    Done,
    Gate(bool),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done | Outcome::Gate(true)) => ExitCode::SUCCESS,
        Ok(Outcome::Gate(false)) => {
            eprintln!("gate: FAIL");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve(cli: &Cli, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(o);
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(cfg: &RunConfig) -> Result<()> {
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Outcome> {
    match &cli.command {
        Command::GenEmbeddings {
            v,
            d,
            topics,
            spread,
            seed,
            out,
        } => {
            if *v == 0 || *d == 0 {
                bail!("v and d must be positive");
            }
            let e = if *topics == 0 {
                gaussian_embeddings(*v, *d, *seed)
            } else {
                clustered_embeddings(*v, *d, *topics, *spread, *seed)
            };
            save_matrix(&e, out)?;
            eprintln!("wrote {v}×{d} embeddings to {}", out.display());
            Ok(Outcome::Done)
        }
        Command::GenHidden {
            n,
            d,
            embeddings,
            gain,
            seed,
            out,
        } => {
            if *n == 0 {
                bail!("n must be positive");
            }
            let batch = match (embeddings, d) {
                (Some(path), _) => hard_queries(&load_embeddings(path)?, *n, *gain, *seed),
                (None, Some(d)) if *d > 0 => unit_normal_queries(*n, *d, *seed),
                _ => bail!("gen-hidden needs --d or --embeddings"),
            };
            save_matrix(&batch.vectors, out)?;
            eprintln!(
                "wrote {n}×{} hidden states to {}",
                batch.vectors.cols(),
                out.display()
            );
            Ok(Outcome::Done)
        }
        Command::DumpIndex { index } => {
            let (idx, q) = load_index_with_quantized(index)?;
            print!("{}", describe_index(&idx, q.as_ref()));
            Ok(Outcome::Done)
        }
        Command::Config(o) => {
            let cfg = resolve(&cli, o)?;
            cfg.validate_probes(cfg.clusters)?;
            print!("{}", toml::to_string(&cfg)?);
            Ok(Outcome::Done)
        }
        Command::Cluster(o) => cmd_cluster(&resolve(&cli, o)?),
        Command::Decode { o, oracle } => cmd_decode(&resolve(&cli, o)?, *oracle),
        Command::Eval {
            o,
            gate,
            min_containment,
        } => cmd_eval(&resolve(&cli, o)?, *gate, *min_containment),
        Command::Bench {
            o,
            gate,
            min_speedup,
        } => {
            let cfg = resolve(&cli, o)?;
            cfg.validate_bench()?;
            cmd_bench(&cfg, *gate, *min_speedup)
        }
        Command::McEval { o, gate } => cmd_mc(&resolve(&cli, o)?, *gate),
        Command::Sweep {
            o,
            grid_c,
            grid_p,
            gate,
        } => {
            let cfg = resolve(&cli, o)?;
            cfg.validate_bench()?;
            cmd_sweep(&cfg, grid_c, grid_p, *gate)
        }
    }
}

fn describe_index(idx: &ClusteredIndex, q: Option<&QuantizedCentroids>) -> String {
    let trace = &idx.meta.objective_trace;
    let mut s = format!(
        "clusters {}\ndim {}\ncluster_size {}\nvocab {}\nbalanced {}\nseed {}\niterations {}\n",
        idx.clusters(),
        idx.dim(),
        idx.cluster_size(),
        idx.vocab(),
        idx.is_balanced(),
        idx.meta.seed,
        idx.meta.iterations,
    );
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        s += &format!("objective {first:.6} -> {last:.6}\n");
    }
    match q {
        Some(q) => s += &format!("stage1 int{} group {}\n", q.bits(), q.group_size()),
        None => s += "stage1 f32\n",
    }
    s
}

/// Index plus the stage-1 centroids to use: `--bits` requantizes, otherwise a
/// quantized section stored in the file is used.
fn load_head_parts(
    cfg: &RunConfig,
) -> Result<(Matrix, ClusteredIndex, Option<QuantizedCentroids>)> {
    let e = load_embeddings(cfg.require(&cfg.embeddings, "embeddings")?)?;
    let (index, stored) = load_index_with_quantized(cfg.require(&cfg.index, "index")?)?;
    cfg.validate_probes(index.clusters())?;
    let q = match cfg.bits {
        Some(bits) => Some(quantize_centroids(index.centroids(), bits, cfg.group_size)?),
        None => stored,
    };
    Ok((e, index, q))
}

fn head<'a>(
    index: &'a ClusteredIndex,
    e: &'a Matrix,
    q: Option<&'a QuantizedCentroids>,
) -> Result<FlashHead<'a>> {
    let h = FlashHead::new(index, e)?;
    Ok(match q {
        Some(q) => h.with_quantized(q)?,
        None => h,
    })
}

fn cmd_cluster(cfg: &RunConfig) -> Result<Outcome> {
    let out = cfg.require(&cfg.out, "out")?;
    let e = load_embeddings(cfg.require(&cfg.embeddings, "embeddings")?)?;
    let opts = cfg.cluster_options();
    opts.validate(e.rows())?;
    if let Some(bits) = cfg.bits {
        flashhead::quant::check_scheme(bits, cfg.group_size, e.cols())?;
    }
    let unit = flashhead::normalize_rows(&e)?;
    let start = Instant::now();
    let index = spherical_kmeans(&unit, &opts)?;
    let secs = start.elapsed().as_secs_f64();
    index.validate()?;
    let q = cfg
        .bits
        .map(|bits| quantize_centroids(index.centroids(), bits, cfg.group_size))
        .transpose()?;
    match &q {
        Some(q) => save_index_with_quantized(&index, q, out)?,
        None => save_index(&index, out)?,
    }
    eprint!("{}", describe_index(&index, q.as_ref()));
    eprintln!("built in {secs:.2}s");
    println!(
        "exact cover: {}",
        if index.is_balanced() {
            "OK"
        } else {
            "padded (unbalanced build)"
        }
    );
    Ok(Outcome::Done)
}

fn cmd_decode(cfg: &RunConfig, oracle: bool) -> Result<Outcome> {
    let (e, index, q) = load_head_parts(cfg)?;
    let hidden = load_hidden(cfg.require(&cfg.hidden, "hidden")?)?;
    hidden.check_dim(e.cols())?;
    let mut lines = String::new();
    if oracle {
        for i in 0..hidden.len() {
            lines += &format!("{}\n", dense_head_oracle(&e, hidden.query(i), 1)?[0]);
        }
    } else {
        let h = head(&index, &e, q.as_ref())?;
        let dc = cfg.decode_config(cfg.probes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for i in 0..hidden.len() {
            lines += &format!("{}\n", h.decode(hidden.query(i), &dc, &mut rng)?);
        }
    }
    match &cfg.out {
        Some(path) => report::write_atomic(path, lines.as_bytes())?,
        None => print!("{lines}"),
    }
    Ok(Outcome::Done)
}

fn cmd_eval(cfg: &RunConfig, gate: bool, min_containment: Option<f64>) -> Result<Outcome> {
    init_threads(cfg)?;
    let (e, index, q) = load_head_parts(cfg)?;
    let hidden = load_hidden(cfg.require(&cfg.hidden, "hidden")?)?;
    if cfg.k > e.rows() {
        bail!("k = {} exceeds the vocabulary of {}", cfg.k, e.rows());
    }
    let h = head(&index, &e, q.as_ref())?;
    let r = containment_with(&h, &hidden, &cfg.decode_config(cfg.probes), cfg.k)?;
    let mut t = Table::new(&[
        "k",
        "n",
        "hits",
        "fraction",
        "clusters",
        "probes",
        "mode",
        "quant_bits",
    ]);
    t.push(vec![
        r.k.to_string(),
        r.n.to_string(),
        r.hits.to_string(),
        r.fraction.to_string(),
        r.clusters.to_string(),
        r.probes.to_string(),
        r.mode.to_string(),
        r.quant_bits.map(|b| b.to_string()).unwrap_or_default(),
    ]);
    t.emit(cfg.format, cfg.out.as_deref())?;
    if !gate {
        return Ok(Outcome::Done);
    }
    let full = r.probes < r.clusters || r.fraction == 1.0;
    let floor = min_containment.is_none_or(|m| r.fraction >= m);
    eprintln!(
        "gate: full-probe equivalence {}, containment floor {}",
        ok(full),
        ok(floor)
    );
    Ok(Outcome::Gate(full && floor))
}

fn ok(b: bool) -> &'static str {
    if b {
        "PASS"
    } else {
        "FAIL"
    }
}

fn latency_row(name: &str, s: &LatencyStats, speedup: f64, hardware: &str) -> Vec<String> {
    vec![
        name.into(),
        format!("{:.6}", s.mean_ms),
        format!("{:.6}", s.median_ms),
        format!("{:.6}", s.p95_ms),
        s.reps.to_string(),
        s.warmup.to_string(),
        format!("{speedup:.4}"),
        hardware.into(),
    ]
}

fn cmd_bench(cfg: &RunConfig, gate: bool, min_speedup: f64) -> Result<Outcome> {
    let (e, index, q) = load_head_parts(cfg)?;
    let hidden = load_hidden(cfg.require(&cfg.hidden, "hidden")?)?;
    let h = head(&index, &e, q.as_ref())?;
    let r = bench_tpot_head(&h, &hidden, cfg.probes, cfg.reps, cfg.warmup)?;
    let mut t = Table::new(&[
        "head",
        "mean_ms",
        "median_ms",
        "p95_ms",
        "reps",
        "warmup",
        "speedup",
        "hardware",
    ]);
    t.push(latency_row(
        "flashhead",
        &r.flash,
        r.speedup_vs_dense,
        &r.hardware,
    ));
    t.push(latency_row("dense", &r.dense, 1.0, &r.hardware));
    t.emit(cfg.format, cfg.out.as_deref())?;
    if !gate {
        return Ok(Outcome::Done);
    }
    let pass = r.speedup_vs_dense >= min_speedup;
    eprintln!(
        "gate: speedup {:.2} >= {min_speedup}: {}",
        r.speedup_vs_dense,
        ok(pass)
    );
    Ok(Outcome::Gate(pass))
}

fn cmd_mc(cfg: &RunConfig, gate: bool) -> Result<Outcome> {
    init_threads(cfg)?;
    let e = load_embeddings(cfg.require(&cfg.embeddings, "embeddings")?)?;
    let index = load_index_with_quantized(cfg.require(&cfg.index, "index")?)?.0;
    let hidden = load_hidden(cfg.require(&cfg.hidden, "hidden")?)?;
    hidden.check_dim(e.cols())?;
    if cfg.query >= hidden.len() {
        bail!(
            "query row {} out of range for {} hidden states",
            cfg.query,
            hidden.len()
        );
    }
    cfg.validate_probes(index.clusters())?;
    let h = hidden.query(cfg.query);
    let exact = match exact_marginal(&index, &e, h, cfg.probes, cfg.temperature) {
        Ok(m) => Some(m),
        Err(Error::TooManySubsets { subsets, .. }) => {
            eprintln!("exact marginal skipped: {subsets} probe subsets");
            None
        }
        Err(err) => return Err(err.into()),
    };
    let mut t = Table::new(&["n", "l1", "clipped", "wall_ms"]);
    let mut last_l1 = None;
    let mut normalized = true;
    for (i, &n) in cfg.samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        let start = Instant::now();
        let est = mc_marginal(&index, &e, h, cfg.probes, cfg.temperature, n, &mut rng)?;
        let wall = start.elapsed().as_secs_f64() * 1e3;
        normalized &= (est.total() - 1.0).abs() <= 1e-12;
        let l1 = exact.as_ref().map(|x| l1_distance(&est.probs, &x.probs));
        let clipped = clip_zeros(&est)?.clipped;
        last_l1 = l1;
        t.push(vec![
            n.to_string(),
            l1.map(|x| format!("{x:.6e}")).unwrap_or_default(),
            clipped.to_string(),
            format!("{wall:.3}"),
        ]);
    }
    t.emit(cfg.format, cfg.out.as_deref())?;
    if !gate {
        return Ok(Outcome::Done);
    }
    let close = last_l1.is_some_and(|x| x <= 0.01);
    eprintln!(
        "gate: L1 at largest N <= 0.01 {}, normalization {}",
        ok(close),
        ok(normalized)
    );
    Ok(Outcome::Gate(close && normalized))
}

fn cmd_sweep(cfg: &RunConfig, grid_c: &[usize], grid_p: &[usize], gate: bool) -> Result<Outcome> {
    init_threads(cfg)?;
    if grid_c.is_empty() || grid_p.is_empty() {
        bail!("sweep grids must be non-empty");
    }
    let e = load_embeddings(cfg.require(&cfg.embeddings, "embeddings")?)?;
    let hidden = load_hidden(cfg.require(&cfg.hidden, "hidden")?)?;
    let rows = sweep(
        &e,
        &cfg.cluster_options(),
        grid_c,
        grid_p,
        &hidden,
        cfg.reps,
        cfg.warmup,
        |r| {
            eprintln!(
                "c={} p={} containment {:.4} speedup {:.2}",
                r.clusters, r.probes, r.containment, r.speedup
            )
        },
    )?;
    let mut t = Table::new(&[
        "clusters",
        "probes",
        "containment",
        "flash_median_ms",
        "dense_median_ms",
        "speedup",
        "cost_ratio",
    ]);
    for r in &rows {
        t.push(vec![
            r.clusters.to_string(),
            r.probes.to_string(),
            r.containment.to_string(),
            format!("{:.6}", r.flash_median_ms),
            format!("{:.6}", r.dense_median_ms),
            format!("{:.4}", r.speedup),
            format!("{:.4}", r.cost_ratio),
        ]);
    }
    t.emit(cfg.format, cfg.out.as_deref())?;
    if !gate {
        return Ok(Outcome::Done);
    }
    let monotone = grid_c.iter().all(|&c| {
        let mut by_p: Vec<_> = rows
            .iter()
            .filter(|r| r.clusters == c)
            .map(|r| (r.probes, r.containment))
            .collect();
        by_p.sort_by_key(|x| x.0);
        by_p.windows(2).all(|w| w[0].1 <= w[1].1)
    });
    eprintln!("gate: containment non-decreasing in p {}", ok(monotone));
    Ok(Outcome::Gate(monotone))
}
