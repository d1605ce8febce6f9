use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flashhead::synth::eight_directions;
use flashhead::tensor_io::save_matrix;
use tempfile::TempDir;

fn flashhead(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flashhead"))
        .current_dir(dir)
        .env_remove("FLASHHEAD_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = flashhead(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Embeddings, hidden states and a 16-cluster index in a temp dir.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "gen-embeddings",
            "--v",
            "512",
            "--d",
            "16",
            "--topics",
            "20",
            "--seed",
            "3",
            "-o",
            "e.bin",
        ],
    );
    ok(
        p,
        &[
            "gen-hidden",
            "--n",
            "40",
            "-e",
            "e.bin",
            "--seed",
            "4",
            "-o",
            "h.bin",
        ],
    );
    ok(
        p,
        &[
            "cluster",
            "-e",
            "e.bin",
            "--c",
            "16",
            "--max-iterations",
            "20",
            "-o",
            "idx.bin",
        ],
    );
    dir
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

#[test]
fn cluster_f8_reports_exact_cover() {
    let dir = tempfile::tempdir().unwrap();
    save_matrix(&eight_directions(), path(&dir, "f8.bin")).unwrap();
    let out = ok(
        dir.path(),
        &[
            "cluster", "-e", "f8.bin", "--c", "4", "--seed", "7", "-o", "f8.idx",
        ],
    );
    assert!(out.contains("exact cover: OK"), "{out}");
    let dump = ok(dir.path(), &["dump-index", "-i", "f8.idx"]);
    assert!(
        dump.contains("clusters 4\n") && dump.contains("cluster_size 2\n"),
        "{dump}"
    );
}

#[test]
fn indivisible_cluster_count_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    save_matrix(&eight_directions(), path(&dir, "f8.bin")).unwrap();
    let out = flashhead(
        dir.path(),
        &["cluster", "-e", "f8.bin", "--c", "5", "-o", "f8.idx"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid options"));
    assert!(!path(&dir, "f8.idx").exists());
}

#[test]
fn invalid_config_writes_nothing() {
    let dir = workspace();
    let out = flashhead(
        dir.path(),
        &[
            "eval", "-e", "e.bin", "-i", "idx.bin", "--hidden", "h.bin", "--c", "16", "--p", "17",
            "-o", "r.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!path(&dir, "r.csv").exists());
    let out = flashhead(
        dir.path(),
        &[
            "bench", "-e", "e.bin", "-i", "idx.bin", "--hidden", "h.bin", "--p", "4", "--reps",
            "5", "-o", "b.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!path(&dir, "b.csv").exists());
}

#[test]
fn full_probe_decode_matches_oracle() {
    let dir = workspace();
    let base = [
        "decode", "-e", "e.bin", "-i", "idx.bin", "--hidden", "h.bin", "--p", "16",
    ];
    let flash = ok(dir.path(), &base);
    let oracle = ok(dir.path(), &[&base[..], &["--oracle"]].concat());
    assert_eq!(flash.lines().count(), 40);
    assert_eq!(flash, oracle);
    let int4 = ok(
        dir.path(),
        &[&base[..], &["--bits", "4", "--group-size", "8"]].concat(),
    );
    assert_eq!(int4, oracle);
}

#[test]
fn sampled_decode_is_seeded_and_cold_limit_is_greedy() {
    let dir = workspace();
    let base = [
        "decode", "-e", "e.bin", "-i", "idx.bin", "--hidden", "h.bin",
    ];
    let sample = |extra: &[&str]| ok(dir.path(), &[&base[..], extra].concat());
    let a = sample(&["--p", "4", "--mode", "sample", "--seed", "1"]);
    assert_eq!(a, sample(&["--p", "4", "--mode", "sample", "--seed", "1"]));
    let cold = sample(&["--p", "16", "--mode", "sample", "--temperature", "1e-6"]);
    assert_eq!(cold, sample(&["--p", "16"]));
}

#[test]
fn eval_full_probe_is_one_and_gates() {
    let dir = workspace();
    let args = [
        "eval", "-e", "e.bin", "-i", "idx.bin", "--hidden", "h.bin", "--k", "1", "--p", "16",
        "--gate",
    ];
    let csv = ok(dir.path(), &args);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("k,n,hits,fraction,clusters,probes,mode,quant_bits")
    );
    assert_eq!(lines.next(), Some("1,40,40,1,16,16,greedy,"));

    let strict = flashhead(
        dir.path(),
        &[
            "eval",
            "-e",
            "e.bin",
            "-i",
            "idx.bin",
            "--hidden",
            "h.bin",
            "--p",
            "1",
            "--gate",
            "--min-containment",
            "1.01",
        ],
    );
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn bench_excludes_warmup() {
    let dir = workspace();
    let csv = ok(
        dir.path(),
        &[
            "bench", "-e", "e.bin", "-i", "idx.bin", "--hidden", "h.bin", "--p", "4", "--reps",
            "30", "--warmup", "10",
        ],
    );
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(
        rows[0][..6],
        ["head", "mean_ms", "median_ms", "p95_ms", "reps", "warmup"]
    );
    for row in &rows[1..] {
        assert_eq!((row[4], row[5]), ("30", "10"));
    }
    assert_eq!(rows.len(), 3);
}

#[test]
fn mc_eval_reports_requested_sample_counts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "gen-embeddings",
            "--v",
            "12",
            "--d",
            "4",
            "--seed",
            "1",
            "-o",
            "e.bin",
        ],
    );
    ok(
        p,
        &[
            "gen-hidden",
            "--n",
            "2",
            "--d",
            "4",
            "--seed",
            "2",
            "-o",
            "h.bin",
        ],
    );
    ok(p, &["cluster", "-e", "e.bin", "--c", "4", "-o", "idx.bin"]);
    ok(p, &["config", "--c", "4", "--p", "2"]);
    let csv = ok(
        p,
        &[
            "mc-eval",
            "-e",
            "e.bin",
            "-i",
            "idx.bin",
            "--hidden",
            "h.bin",
            "--c",
            "4",
            "--p",
            "2",
            "--n",
            "100,100000",
            "--gate",
        ],
    );
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["n", "l1", "clipped", "wall_ms"]);
    assert_eq!((rows[1][0], rows[2][0]), ("100", "100000"));
    let l1: f64 = rows[2][1].parse().unwrap();
    assert!(l1 <= 0.01, "{l1}");
}

#[test]
fn sweep_emits_one_row_per_grid_point() {
    let dir = workspace();
    let csv = ok(
        dir.path(),
        &[
            "sweep",
            "-e",
            "e.bin",
            "--hidden",
            "h.bin",
            "--grid-c",
            "8,16",
            "--grid-p",
            "1,2,8",
            "--max-iterations",
            "10",
            "--gate",
        ],
    );
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows[0],
        "clusters,probes,containment,flash_median_ms,dense_median_ms,speedup,cost_ratio"
    );
    assert_eq!(rows.len(), 7);
    assert!(rows[1].starts_with("8,1,") && rows[6].starts_with("16,8,"));
}

#[test]
fn config_file_flag_and_env_precedence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        path(&dir, "run.toml"),
        "clusters = 64\nprobes = 8\nthreads = 3\n",
    )
    .unwrap();
    let show = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_flashhead"));
        cmd.current_dir(dir.path()).env_remove("FLASHHEAD_THREADS");
        if let Some(v) = env {
            cmd.env("FLASHHEAD_THREADS", v);
        }
        let out = cmd
            .args(["config", "--config", "run.toml"])
            .args(extra)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    let file_only = show(&[], None);
    assert!(file_only.contains("clusters = 64") && file_only.contains("probes = 8"));
    assert!(file_only.contains("threads = 3") && file_only.contains("group_size = 64"));
    let flagged = show(&["--p", "16", "--threads", "2"], Some("5"));
    assert!(flagged.contains("probes = 16") && flagged.contains("threads = 2"));
    assert!(show(&[], Some("5")).contains("threads = 5"));

    std::fs::write(path(&dir, "bad.toml"), "probes = 128\nclusters = 64\n").unwrap();
    let out = flashhead(dir.path(), &["config", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn table_format_is_aligned() {
    let dir = workspace();
    let out = ok(
        dir.path(),
        &[
            "eval", "-e", "e.bin", "-i", "idx.bin", "--hidden", "h.bin", "--p", "16", "--format",
            "table",
        ],
    );
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].trim_start().starts_with('k') && lines[0].contains("fraction"));
}
