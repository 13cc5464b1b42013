use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use vse_core::eval::{self, SynthSpec};
use vse_core::io;
use vse_core::persist;
use vse_core::{BuildConfig, Index, Rows};

fn vse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vse"))
        .args(args)
        .env_remove("VSE_THREADS")
        .output()
        .expect("run vse")
}

fn ok(args: &[&str]) -> String {
    let out = vse(args);
    assert!(
        out.status.success(),
        "vse {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Dir(TempDir);

impl Dir {
    fn new() -> Self {
        Dir(TempDir::new().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }
}

fn synth(dir: &Dir, name: &str, identities: usize, per: usize, dim: usize) -> PathBuf {
    let set = eval::synthetic_identities(&SynthSpec {
        identities,
        per_identity: per,
        dim,
        sigma: 0.05,
        seed: 7,
    })
    .unwrap();
    let p = dir.path(name);
    io::write_embeddings(&set, &p, &io::default_labels_path(&p)).unwrap();
    p
}

#[test]
fn ingest_csv_with_normalize_gives_unit_vectors() {
    let d = Dir::new();
    std::fs::write(d.path("in.csv"), "1,0\n0,1\n").unwrap();
    ok(&[
        "ingest",
        "-i",
        &d.arg("in.csv"),
        "-o",
        &d.arg("out.fvb"),
        "--normalize",
    ]);
    let set = io::read_embeddings(&d.path("out.fvb"), &d.path("out.labels")).unwrap();
    assert!(set.is_normalized());
    assert_eq!(set.data(), &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(set.labels(), ["0", "1"]);
}

#[test]
fn ingest_reports_bad_row_with_exit_2() {
    let d = Dir::new();
    std::fs::write(d.path("in.csv"), "1,0\n0,1\n2,nan\n").unwrap();
    let out = vse(&["ingest", "-i", &d.arg("in.csv"), "-o", &d.arg("out.fvb")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 3"));
    assert!(!d.path("out.fvb").exists());

    std::fs::write(d.path("ragged.csv"), "1,0\n0,1,2\n").unwrap();
    let out = vse(&[
        "ingest",
        "-i",
        &d.arg("ragged.csv"),
        "-o",
        &d.arg("out.fvb"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));
}

#[test]
fn ingest_then_export_is_identity_on_fvb() {
    let d = Dir::new();
    let src = synth(&d, "src.fvb", 20, 3, 16);
    ok(&["ingest", "-i", &d.arg("src.fvb"), "-o", &d.arg("a.fvb")]);
    ok(&["export", "-i", &d.arg("a.fvb"), "-o", &d.arg("b.fvb")]);
    assert_eq!(
        std::fs::read(&src).unwrap(),
        std::fs::read(d.path("b.fvb")).unwrap()
    );
    assert_eq!(
        std::fs::read(d.path("src.labels")).unwrap(),
        std::fs::read(d.path("b.labels")).unwrap()
    );
}

#[test]
fn large_random_csv_round_trips_within_f32_rounding() {
    let d = Dir::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (rows, dim) = (10_000, 8);
    let values: Vec<f64> = (0..rows * dim)
        .map(|_| rng.random_range(-100.0..100.0))
        .collect();
    let mut text = String::new();
    for row in values.chunks(dim) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.12}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(d.path("big.csv"), text).unwrap();
    ok(&["ingest", "-i", &d.arg("big.csv"), "-o", &d.arg("big.fvb")]);
    let set = io::read_embeddings(&d.path("big.fvb"), &d.path("big.labels")).unwrap();
    assert_eq!(set.len(), rows);
    for (got, want) in set.data().iter().zip(&values) {
        assert!(((*got as f64) - want).abs() <= want.abs() * f32::EPSILON as f64);
    }
    ok(&["export", "-i", &d.arg("big.fvb"), "-o", &d.arg("back.csv")]);
    ok(&[
        "ingest",
        "-i",
        &d.arg("back.csv"),
        "-o",
        &d.arg("again.fvb"),
    ]);
    assert_eq!(
        std::fs::read(d.path("big.fvb")).unwrap(),
        std::fs::read(d.path("again.fvb")).unwrap()
    );
}

#[test]
fn flat_search_finds_the_query_row_at_distance_zero() {
    let d = Dir::new();
    let base = synth(&d, "base.fvb", 30, 4, 16);
    let set = io::read_embeddings(&base, &io::default_labels_path(&base)).unwrap();
    let queries = set.select(&[17, 3]);
    io::write_embeddings(&queries, &d.path("q.fvb"), &d.path("q.labels")).unwrap();
    ok(&["build", "-i", &d.arg("base.fvb"), "-o", &d.arg("flat.vidx")]);
    let tsv = ok(&[
        "search",
        "--index",
        &d.arg("flat.vidx"),
        "-q",
        &d.arg("q.fvb"),
        "-k",
        "3",
    ]);
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "query_idx\trank\tid\tlabel\tdist");
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert_eq!(lines[1], format!("0\t1\t17\t{}\t0", set.label(17)));
    assert_eq!(lines[4], format!("1\t1\t3\t{}\t0", set.label(3)));
}

#[test]
fn cli_search_matches_in_process_search_for_every_kind() {
    let d = Dir::new();
    let base = synth(&d, "base.fvb", 100, 4, 16);
    let set = io::read_embeddings(&base, &io::default_labels_path(&base)).unwrap();
    let q = synth(&d, "q.fvb", 10, 2, 16);
    let (_, qdata) = io::decode_fvb_payload(&std::fs::read(&q).unwrap()).unwrap();
    let variants: [(&str, &[&str]); 3] = [
        ("flat", &[]),
        ("ivf-flat", &["--nlist", "8", "--seed", "3"]),
        ("ivf-pq", &["--nlist", "8", "--m", "4", "--seed", "3"]),
    ];
    for (kind, extra) in variants {
        let idx = d.arg(&format!("{kind}.vidx"));
        let mut args = vec![
            "build",
            "-i",
            base.to_str().unwrap(),
            "-o",
            &idx,
            "--kind",
            kind,
        ];
        args.extend_from_slice(extra);
        ok(&args);
        let tsv = ok(&[
            "search",
            "--index",
            &idx,
            "-q",
            q.to_str().unwrap(),
            "-k",
            "5",
            "--nprobe",
            "2",
        ]);

        let config = match kind {
            "flat" => BuildConfig::Flat,
            "ivf-flat" => BuildConfig::IvfFlat(vse_core::ivf_flat::IvfParams::new(8, 3)),
            _ => BuildConfig::IvfPq(vse_core::ivf_pq::IvfPqParams::new(8, 4, 3)),
        };
        let index = Index::build(set.clone(), &config).unwrap();
        assert_eq!(persist::load_index(Path::new(&idx)).unwrap(), index);
        let results = index
            .search(Rows::new(16, &qdata).unwrap(), 5, Some(2))
            .unwrap();
        let mut expected = String::from("query_idx\trank\tid\tlabel\tdist\n");
        for (qi, r) in results.iter().enumerate() {
            for (rank, n) in r.entries.iter().enumerate() {
                expected.push_str(&format!(
                    "{qi}\t{}\t{}\t{}\t{}\n",
                    rank + 1,
                    n.id,
                    index.label(n.id),
                    n.dist
                ));
            }
        }
        assert_eq!(tsv, expected, "{kind}");
    }
}

#[test]
fn corrupt_index_names_the_offset() {
    let d = Dir::new();
    synth(&d, "base.fvb", 10, 2, 8);
    ok(&["build", "-i", &d.arg("base.fvb"), "-o", &d.arg("i.vidx")]);
    let mut bytes = std::fs::read(d.path("i.vidx")).unwrap();
    bytes[30] ^= 0xff;
    std::fs::write(d.path("i.vidx"), &bytes).unwrap();
    let out = vse(&[
        "search",
        "--index",
        &d.arg("i.vidx"),
        "-q",
        &d.arg("base.fvb"),
    ]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains(&format!("offset {}", bytes.len() - 8)),
        "{err}"
    );
}

#[test]
fn query_dimension_mismatch_is_a_data_error() {
    let d = Dir::new();
    synth(&d, "base.fvb", 10, 2, 8);
    synth(&d, "q.fvb", 2, 1, 16);
    ok(&["build", "-i", &d.arg("base.fvb"), "-o", &d.arg("i.vidx")]);
    let out = vse(&["search", "--index", &d.arg("i.vidx"), "-q", &d.arg("q.fvb")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}

#[test]
fn bench_emits_one_row_per_config() {
    let d = Dir::new();
    synth(&d, "all.fvb", 400, 4, 16);
    ok(&[
        "split",
        "-i",
        &d.arg("all.fvb"),
        "--identities",
        "100",
        "--seed",
        "1",
        "--gallery",
        &d.arg("g.fvb"),
        "--probes",
        &d.arg("p.fvb"),
    ]);
    ok(&[
        "bench",
        "--gallery",
        &d.arg("g.fvb"),
        "--probes",
        &d.arg("p.fvb"),
        "--m",
        "4",
        "--seed",
        "2",
        "--repetitions",
        "1",
        "--tsv",
        &d.arg("b.tsv"),
        "--json",
        &d.arg("b.json"),
    ]);
    let expected = eval::default_bench_matrix(&[64, 256], 4, 2).len();
    let tsv = std::fs::read_to_string(d.path("b.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + expected);
    assert!(tsv.starts_with("strategy\tnum_clustering_centers\taccuracy_pct\ttime_s\tnprobe\tm"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path("b.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), expected);
}

#[test]
fn eval_reports_split_accuracy() {
    let d = Dir::new();
    // Same-identity squared distances sit near 2 * 64 * 0.05^2 = 0.32, strangers near 2.
    synth(&d, "all.fvb", 60, 5, 64);
    ok(&[
        "split",
        "-i",
        &d.arg("all.fvb"),
        "--identities",
        "20",
        "--in-gallery-fraction",
        "0.5",
        "--seed",
        "4",
        "--gallery",
        &d.arg("g.fvb"),
        "--probes",
        &d.arg("p.fvb"),
    ]);
    ok(&["build", "-i", &d.arg("g.fvb"), "-o", &d.arg("g.vidx")]);
    ok(&[
        "eval",
        "--index",
        &d.arg("g.vidx"),
        "--probes",
        &d.arg("p.fvb"),
        "--threshold",
        "0.8",
        "--json",
        &d.arg("e.json"),
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path("e.json")).unwrap()).unwrap();
    let r = &json[0];
    assert_eq!(r["strategy"], "flat");
    assert_eq!(r["n_probes"], 60);
    assert_eq!(r["n_in_gallery"], 30);
    assert_eq!(r["closed_set_accuracy"], 100.0);
    assert_eq!(r["open_set_accuracy"], 100.0);
}

#[test]
fn clean_writes_gallery_and_json_lines() {
    let d = Dir::new();
    synth(&d, "g.fvb", 5, 6, 16);
    ok(&[
        "clean",
        "-i",
        &d.arg("g.fvb"),
        "-o",
        &d.arg("c.fvb"),
        "--report",
        &d.arg("r.jsonl"),
        "--seed",
        "1",
    ]);
    let report = std::fs::read_to_string(d.path("r.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = report
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    let kept: usize = lines
        .iter()
        .map(|l| l["kept"].as_array().unwrap().len())
        .sum();
    let cleaned = io::read_embeddings(&d.path("c.fvb"), &d.path("c.labels")).unwrap();
    assert_eq!(cleaned.len(), kept);
}

#[test]
fn fuse_halves_and_pairs() {
    let d = Dir::new();
    synth(&d, "a.fvb", 4, 2, 8);
    ok(&[
        "fuse",
        "-i",
        &d.arg("a.fvb"),
        "--strategy",
        "concat",
        "-o",
        &d.arg("h.fvb"),
    ]);
    let halves = io::read_embeddings(&d.path("h.fvb"), &d.path("h.labels")).unwrap();
    assert_eq!((halves.len(), halves.dim()), (4, 16));
    ok(&[
        "fuse",
        "-i",
        &d.arg("a.fvb"),
        "--second",
        &d.arg("a.fvb"),
        "--strategy",
        "SUM",
        "-o",
        &d.arg("s.fvb"),
    ]);
    let set = io::read_embeddings(&d.path("a.fvb"), &d.path("a.labels")).unwrap();
    let summed = io::read_embeddings(&d.path("s.fvb"), &d.path("s.labels")).unwrap();
    for (a, b) in set.data().iter().zip(summed.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    let out = vse(&[
        "fuse",
        "-i",
        &d.arg("a.fvb"),
        "--strategy",
        "median",
        "-o",
        &d.arg("x.fvb"),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(code(&vse(&["frobnicate"])), 1);
    assert_eq!(code(&vse(&["build"])), 1);
    assert_eq!(code(&vse(&["--help"])), 0);
    assert_eq!(code(&vse(&["--version"])), 0);
    let d = Dir::new();
    synth(&d, "base.fvb", 10, 2, 8);
    let out = vse(&[
        "build",
        "-i",
        &d.arg("base.fvb"),
        "-o",
        &d.arg("i.vidx"),
        "--kind",
        "ivf-flat",
        "--nlist",
        "2",
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    assert!(!d.path("i.vidx").exists());
    assert_eq!(
        code(&vse(&[
            "--threads",
            "0",
            "synth",
            "--seed",
            "1",
            "-o",
            &d.arg("s.fvb")
        ])),
        1
    );
}

#[test]
fn missing_input_is_a_data_error() {
    let d = Dir::new();
    let out = vse(&["build", "-i", &d.arg("nope.fvb"), "-o", &d.arg("i.vidx")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn thread_count_does_not_change_results() {
    let d = Dir::new();
    synth(&d, "base.fvb", 300, 10, 16);
    let build = |threads: &str, out: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_vse"))
            .args([
                "build",
                "-i",
                &d.arg("base.fvb"),
                "-o",
                &d.arg(out),
                "--kind",
                "ivf-pq",
            ])
            .args(["--nlist", "16", "--m", "4", "--seed", "9"])
            .env("VSE_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
    };
    build("1", "one.vidx");
    build("4", "four.vidx");
    assert_eq!(
        std::fs::read(d.path("one.vidx")).unwrap(),
        std::fs::read(d.path("four.vidx")).unwrap()
    );
}
