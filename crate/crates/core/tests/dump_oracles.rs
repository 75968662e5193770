//! Recomputes dumped statistics from the raw attention rows alone.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde_json::Value;
use vasparse::decoding::{generate, start_recorded_session, DecodeConfig};
use vasparse::harness::{GroundingTask, TaskConfig};
use vasparse::model::record::write_jsonl;
use vasparse::model::{ModelConfig, Weights};

fn dump_lines(cfg: &DecodeConfig, seed: u64) -> (Vec<Value>, usize) {
    let weights = Arc::new(Weights::init(&ModelConfig::desk()).unwrap());
    let task = GroundingTask::generate(256, &TaskConfig::default(), seed).unwrap();
    let s = start_recorded_session(weights, &task.image_tokens, &task.prompt_tokens, cfg).unwrap();
    let mut g = generate(s, cfg).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &g.state.take_dump()).unwrap();
    let lines = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    (lines, task.image_tokens.len())
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn unpruned(beta: f64) -> DecodeConfig {
    DecodeConfig {
        sparsity_fraction: 1.0,
        beta,
        max_new_tokens: 64,
        ignore_eos: true,
        ..Default::default()
    }
}

/// Without pruning every head keeps the full history, so the per-row running
/// statistics used during decoding must agree with statistics recomputed from
/// the dumped attention rows.
#[test]
fn event_records_match_recomputation_from_attention_rows() {
    for beta in [0.0, 0.1, 0.5] {
        let (lines, n_image) = dump_lines(&unpruned(beta), 4);
        // Column mass per head, keyed by position, accumulated in one pass.
        let mut mass: HashMap<(u64, u64), BTreeMap<u64, f64>> = HashMap::new();
        let mut image_mass: HashMap<(u64, u64), Vec<f64>> = HashMap::new();
        let (mut max_layer, mut max_head) = (0, 0);
        let (mut penalties, mut saliencies) = (0, 0);
        for line in &lines {
            let key = || {
                (
                    line["layer"].as_u64().unwrap(),
                    line["head"].as_u64().unwrap(),
                )
            };
            match line["kind"].as_str().unwrap() {
                "attention" => {
                    let (l, h) = key();
                    max_layer = max_layer.max(l);
                    max_head = max_head.max(h);
                    let cols = line["columns"].as_array().unwrap();
                    let scores = floats(&line["scores"]);
                    let m = mass.entry((l, h)).or_default();
                    let mut img = 0.0;
                    for (c, a) in cols.iter().zip(&scores) {
                        let pos = c.as_u64().unwrap();
                        *m.entry(pos).or_insert(0.0) += a;
                        if (pos as usize) < n_image {
                            img += a;
                        }
                    }
                    image_mass.entry((l, h)).or_default().push(img);
                }
                "penalty" => {
                    penalties += 1;
                    let m: Vec<f64> = mass[&key()].values().copied().collect();
                    let expected = softmax(&m);
                    let got = floats(&line["weights"]);
                    assert_eq!(got.len(), expected.len());
                    for (a, b) in got.iter().zip(&expected) {
                        assert!((a - b).abs() < 1e-12, "beta {beta}: {a} vs {b}");
                    }
                }
                "saliency" => {
                    saliencies += 1;
                    // The default source is the last head of the last layer.
                    let src = &image_mass[&(max_layer, max_head)];
                    let expected = softmax(src);
                    let got = floats(&line["scores"]);
                    assert_eq!(got.len(), expected.len());
                    for (a, b) in got.iter().zip(&expected) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
                "sequence" => {}
                other => panic!("unknown record kind {other}"),
            }
        }
        assert_eq!(penalties, 4 * 16);
        assert_eq!(saliencies, 4 * 16);
    }
}

#[test]
fn attention_rows_are_distributions_with_causal_columns() {
    let (lines, _) = dump_lines(
        &DecodeConfig {
            ignore_eos: true,
            ..Default::default()
        },
        2,
    );
    let mut rows = 0;
    for line in lines.iter().filter(|l| l["kind"] == "attention") {
        rows += 1;
        let step = line["step"].as_u64().unwrap();
        let cols = line["columns"].as_array().unwrap();
        assert!(cols.iter().all(|c| c.as_u64().unwrap() <= step));
        let s: f64 = floats(&line["scores"]).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    assert!(rows > 0);
}

#[test]
fn sequence_record_closes_the_dump() {
    let (lines, n_image) = dump_lines(&unpruned(0.1), 9);
    let last = lines.last().unwrap();
    assert_eq!(last["kind"], "sequence");
    let m = last["modalities"].as_array().unwrap();
    assert!(m[..n_image].iter().all(|v| v == "image"));
    assert!(m[n_image..].iter().all(|v| v != "image"));
}

#[test]
fn sink_flags_match_one_pass_recomputation() {
    use vasparse::analysis::detect_sinks;
    use vasparse::model::record::{read_jsonl, split_dump};
    use vasparse::model::TokenSequence;

    let cfg = DecodeConfig {
        max_new_tokens: 64,
        ignore_eos: true,
        ..Default::default()
    };
    let (lines, _) = dump_lines(&cfg, 12);

    let mut mass: BTreeMap<u64, f64> = BTreeMap::new();
    for line in lines.iter().filter(|l| l["kind"] == "attention") {
        for (c, a) in line["columns"]
            .as_array()
            .unwrap()
            .iter()
            .zip(floats(&line["scores"]))
        {
            *mass.entry(c.as_u64().unwrap()).or_insert(0.0) += a;
        }
    }
    let mut sorted: Vec<f64> = mass.values().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let expected: Vec<usize> = mass
        .iter()
        .filter(|(_, m)| **m > 4.0 * median)
        .map(|(p, _)| *p as usize)
        .collect();

    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    let records = read_jsonl(text.as_bytes()).unwrap();
    let (record, modalities) = split_dump(&records);
    let seq = TokenSequence::from_modalities(modalities.unwrap()).unwrap();
    let report = detect_sinks(&record, &seq, 4.0).unwrap();
    assert_eq!(report.sinks(), expected);
    assert_eq!(report.entries.len(), n);
}
