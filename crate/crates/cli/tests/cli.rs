use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vasparse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vasparse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_writes_an_all_equal_oracle_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = vasparse(&[
        "verify",
        "--instances",
        "1000",
        "--max-len",
        "16",
        "--out",
        arg(dir.path()),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let csv = fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("instance_id,L,S,lambda,greedy_objective,oracle_objective,equal_flag")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 1000);
    assert!(rows.iter().all(|r| r.ends_with(",1")));
}

#[test]
fn decode_is_byte_identical_for_the_same_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        r#"{"vocab_size":128,"embed_dim":32,"num_heads":2,"head_dim":16,"num_layers":2,
            "max_seq_len":512,"rng_seed":0,"decode":{"max_new_tokens":40}}"#,
    )
    .unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for (d, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let out = vasparse(&[
            "decode",
            "--config",
            arg(&config),
            "--seed",
            seed,
            "--out",
            arg(d),
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let read = |d: &Path| fs::read(d.join("transcript.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let t: serde_json::Value = serde_json::from_slice(&read(&a)).unwrap();
    for key in ["config", "tokens", "per_step", "events"] {
        assert!(t.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn bench_sweep_writes_one_row_per_value_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = vasparse(&[
        "bench",
        "--sweep",
        "fraction=0.5,0.75,0.9,1.0",
        "--seeds",
        "2",
        "--out",
        arg(dir.path()),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    for seed in ["0", "1"] {
        assert_eq!(
            rows.iter()
                .filter(|r| r.split(',').nth(1) == Some(seed))
                .count(),
            4
        );
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["summaries"].as_array().unwrap().len(), 4);
}

#[test]
fn analyze_reads_a_decode_dump() {
    let dir = tempfile::tempdir().unwrap();
    let out = vasparse(&["decode", "--dump", "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let out = vasparse(&[
        "analyze",
        "--input",
        arg(&dir.path().join("attention.jsonl")),
        "--out",
        arg(dir.path()),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let header = |f: &str| {
        fs::read_to_string(dir.path().join(f))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header("recall.csv"), "fraction,recall");
    assert_eq!(
        header("sinks.csv"),
        "position,cumulative_mass,modality,sink_flag"
    );
    assert_eq!(
        header("density.csv"),
        "bin_lo,bin_hi,image_count,text_count"
    );
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(vasparse(&["transmogrify"]).status.code(), Some(2));
    assert_eq!(
        vasparse(&["decode", "--no-such-flag"]).status.code(),
        Some(2)
    );
    assert_eq!(vasparse(&[]).status.code(), Some(2));
    assert_eq!(
        vasparse(&["bench", "--sweep", "fraction"]).status.code(),
        Some(2)
    );
    assert_eq!(
        vasparse(&["verify", "--max-len", "40"]).status.code(),
        Some(2)
    );
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"vocab_size":0}"#).unwrap();
    let out = vasparse(&["decode", "--config", arg(&config), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn in_process_entry_point_matches_binary_contract() {
    assert_eq!(vasparse_cli::cli_main(["vasparse", "nope"]), 2);
    assert_eq!(vasparse_cli::cli_main(["vasparse", "--help"]), 0);
}
