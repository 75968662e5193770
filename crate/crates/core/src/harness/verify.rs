//! Property and oracle suite run by `vasparse verify`.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{detect_sinks, recall_curve};
use crate::calibration::{apply_penalty, penalty_from_column_mass};
use crate::decoding::{
    contrastive_logits, draw_visual_mask, generate, plausibility_filter, start_recorded_session,
    start_session, DecodeConfig, DecodeMode,
};
use crate::harness::oracles::{full_forward_logits, plain_greedy};
use crate::harness::{GroundingTask, TaskConfig};
use crate::linalg::{argmax, softmax};
use crate::model::{
    attention_step, DecoderState, HeadCache, ModelConfig, RowMeta, TokenSequence, Weights,
};
use crate::par::*;
use crate::seed;
use crate::selection::{
    aggregate_discarded, aggregated_scores, objective, oracle_optimal_mask,
    saliency_from_image_mass, select_top_s, DensityParams, SparseMask,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOptions {
    pub instances: usize,
    pub max_len: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            instances: 1000,
            max_len: 16,
            seed: 0,
            model: ModelConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

/// One greedy-vs-exhaustive comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub instance_id: usize,
    pub len: usize,
    pub budget: usize,
    pub lambda: f64,
    pub greedy_objective: f64,
    pub oracle_objective: f64,
    pub equal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub oracle_rows: Vec<OracleRow>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn oracle_csv(&self) -> String {
        let mut s =
            String::from("instance_id,L,S,lambda,greedy_objective,oracle_objective,equal_flag\n");
        for r in &self.oracle_rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:e},{:e},{}",
                r.instance_id,
                r.len,
                r.budget,
                r.lambda,
                r.greedy_objective,
                r.oracle_objective,
                u8::from(r.equal)
            );
        }
        s
    }
}

pub const LAMBDAS: [f64; 3] = [0.0, 0.1, 1.0];

/// A random selection instance: query, row-major keys of width `dim`, and
/// a softmax-normalized saliency vector.
pub fn random_instance(seed: u64, len: usize, dim: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = seed::rng(seed);
    let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let raw: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
    (q, k, softmax(&raw))
}

/// Instance `i` cycles through every `(L, S)` with `1 <= S <= L <= max_len`
/// and through the three lambda values.
pub fn instance_shape(i: usize, max_len: usize) -> (usize, usize, f64) {
    let pairs: Vec<(usize, usize)> = (1..=max_len)
        .flat_map(|l| (1..=l).map(move |s| (l, s)))
        .collect();
    let (l, s) = pairs[i % pairs.len()];
    (l, s, LAMBDAS[i % LAMBDAS.len()])
}

pub fn oracle_rows(instances: usize, max_len: usize, root: u64) -> Vec<OracleRow> {
    (0..instances)
        .into_par_iter()
        .map(|i| {
            let (len, budget, lambda) = instance_shape(i, max_len);
            let (q, k, p) =
                random_instance(seed::substream(root, &format!("instance-{i}")), len, 4);
            let p = crate::selection::SaliencyVector(p);
            let delta = aggregated_scores(&q, &k, &p, lambda).expect("valid instance");
            let greedy = select_top_s(&delta, budget).expect("budget <= len");
            let g = objective(&q, &k, &greedy, &p, lambda).expect("valid instance");
            let (_, o) = oracle_optimal_mask(&q, &k, &p, lambda, budget).expect("tractable");
            OracleRow {
                instance_id: i,
                len,
                budget,
                lambda,
                greedy_objective: g.error,
                oracle_objective: o.error,
                equal: g.error == o.error,
            }
        })
        .collect()
}

fn check_exchange(instances: usize, max_len: usize, root: u64) -> CheckResult {
    let bad = (0..instances)
        .into_par_iter()
        .filter(|&i| {
            let (len, budget, lambda) = instance_shape(i, max_len);
            if budget == len {
                return false;
            }
            let (q, k, p) =
                random_instance(seed::substream(root, &format!("instance-{i}")), len, 4);
            let p = crate::selection::SaliencyVector(p);
            let d = aggregated_scores(&q, &k, &p, lambda).expect("valid");
            let m = select_top_s(&d, budget).expect("valid");
            let base = objective(&q, &k, &m, &p, lambda).expect("valid").error;
            m.kept().into_iter().any(|a| {
                m.pruned().into_iter().any(|b| {
                    let mut bits = m.bits().to_vec();
                    bits.swap(a, b);
                    objective(&q, &k, &SparseMask::from_bits(bits), &p, lambda)
                        .expect("valid")
                        .error
                        < base
                })
            })
        })
        .count();
    CheckResult::new(
        "greedy_exchange",
        bad == 0,
        format!("{bad} of {instances} instances improved by a single swap"),
    )
}

fn small_task(weights: &Weights, seed: u64) -> GroundingTask {
    GroundingTask::generate(weights.config.vocab_size, &TaskConfig::default(), seed)
        .expect("valid task")
}

fn check_cache_free(weights: &Arc<Weights>, seeds: &[u64]) -> CheckResult {
    let worst = seeds
        .par_iter()
        .map(|&s| {
            let task = small_task(weights, s);
            let mut state = DecoderState::from_weights(Arc::clone(weights));
            let (tokens, history) =
                plain_greedy(&mut state, &task.image_tokens, &task.prompt_tokens, 32)
                    .expect("decode");
            let seq = TokenSequence::from_parts(&task.image_tokens, &task.prompt_tokens, &tokens);
            let full = full_forward_logits(weights, &seq);
            let base = task.prompt_len() - 1;
            history
                .iter()
                .enumerate()
                .flat_map(|(t, h)| h.iter().zip(&full[base + t]).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max)
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0, f64::max);
    CheckResult::new(
        "cache_free_oracle",
        worst <= 1e-5,
        format!(
            "max |cached - recomputed| = {worst:e} over {} seeds",
            seeds.len()
        ),
    )
}

fn check_baseline(weights: &Arc<Weights>, seeds: &[u64]) -> CheckResult {
    let cfg = DecodeConfig {
        alpha: 0.0,
        beta: 0.0,
        sparsity_fraction: 1.0,
        max_new_tokens: 64,
        ignore_eos: true,
        ..Default::default()
    };
    let worst = seeds
        .par_iter()
        .map(|&s| {
            let task = small_task(weights, s);
            let mut plain = DecoderState::from_weights(Arc::clone(weights));
            let (tokens, history) =
                plain_greedy(&mut plain, &task.image_tokens, &task.prompt_tokens, 64)
                    .expect("decode");
            let state = start_session(
                Arc::clone(weights),
                &task.image_tokens,
                &task.prompt_tokens,
                &cfg,
            )
            .expect("session");
            let g = generate(state, &cfg).expect("generate");
            if g.tokens != tokens {
                return f64::INFINITY;
            }
            g.steps
                .iter()
                .zip(&history)
                .flat_map(|(st, h)| {
                    st.logits
                        .logit_theta
                        .iter()
                        .zip(h)
                        .map(|(a, b)| (a - b).abs())
                })
                .fold(0.0, f64::max)
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0, f64::max);
    CheckResult::new(
        "baseline_equivalence",
        worst <= 1e-9,
        format!("max logit deviation {worst:e}"),
    )
}

fn check_normalization(weights: &Arc<Weights>, tokens: usize) -> CheckResult {
    let task = small_task(weights, 11);
    let cfg = DecodeConfig {
        max_new_tokens: tokens,
        ignore_eos: true,
        ..Default::default()
    };
    let state = start_recorded_session(
        Arc::clone(weights),
        &task.image_tokens,
        &task.prompt_tokens,
        &cfg,
    )
    .expect("session");
    let mut g = generate(state, &cfg).expect("generate");
    let dump = g.state.take_dump();
    let mut worst: f64 = 0.0;
    let mut counts = [0usize; 3];
    for rec in &dump {
        let (v, slot) = match rec {
            crate::model::DumpRecord::Attention(r) => (&r.scores, 0),
            crate::model::DumpRecord::Saliency { scores, .. } => (scores, 1),
            crate::model::DumpRecord::Penalty { weights, .. } => (weights, 2),
            crate::model::DumpRecord::Sequence { .. } => continue,
        };
        counts[slot] += 1;
        worst = worst.max((v.iter().sum::<f64>() - 1.0).abs());
    }
    CheckResult::new(
        "normalization",
        worst <= 1e-6 && counts.iter().all(|c| *c > 0),
        format!(
            "max |sum - 1| = {worst:e} over {} attention, {} saliency, {} penalty records",
            counts[0], counts[1], counts[2]
        ),
    )
}

fn check_contrastive(weights: &Arc<Weights>) -> Vec<CheckResult> {
    let task = small_task(weights, 5);
    let base = DecodeConfig::default();
    let state = start_session(
        Arc::clone(weights),
        &task.image_tokens,
        &task.prompt_tokens,
        &base,
    )
    .expect("session");
    let mask = draw_visual_mask(
        &mut seed::rng(1),
        task.image_tokens.len(),
        base.visual_mask_rate,
    );
    let at = |alpha: f64| {
        let c = DecodeConfig {
            alpha,
            ..base.clone()
        };
        contrastive_logits(&state, &c, &mask)
            .expect("logits")
            .combined
    };
    let (c0, c1, c2) = (at(0.0), at(0.1), at(0.2));
    let worst = (0..c0.len())
        .map(|i| ((c1[i] - c0[i]) - (c2[i] - c1[i])).abs())
        .fold(0.0, f64::max);
    let affine = CheckResult::new(
        "contrastive_affinity",
        worst <= 1e-9,
        format!("max second difference {worst:e}"),
    );

    let rec = plausibility_filter(
        contrastive_logits(&state, &base, &mask).expect("logits"),
        base.plausibility_threshold,
    );
    let top = argmax(&rec.logit_theta);
    let safety = CheckResult::new(
        "plausibility_safety",
        rec.plausible[top],
        format!("{} survivors", rec.survivors()),
    );
    vec![affine, safety]
}

fn check_generation(weights: &Arc<Weights>) -> Vec<CheckResult> {
    let task = small_task(weights, 21);
    let cfg = DecodeConfig {
        max_new_tokens: 64,
        ignore_eos: true,
        ..Default::default()
    };
    let run = |c: &DecodeConfig| {
        let s = start_session(
            Arc::clone(weights),
            &task.image_tokens,
            &task.prompt_tokens,
            c,
        )
        .expect("session");
        generate(s, c).expect("generate")
    };
    let greedy = run(&cfg);
    let beam1 = run(&DecodeConfig {
        mode: DecodeMode::Beam,
        beam_size: 1,
        ..cfg.clone()
    });
    let beam3 = run(&DecodeConfig {
        mode: DecodeMode::Beam,
        beam_size: 3,
        ..cfg.clone()
    });
    let monotone = beam3.score_trace.windows(2).all(|w| w[1] <= w[0]);
    let again = run(&cfg);

    let shrinks = greedy
        .events
        .iter()
        .flat_map(|e| &e.heads)
        .filter(|h| h.pruned > h.clusters)
        .all(|h| h.rows_after < h.rows_before);
    vec![
        CheckResult::new(
            "beam_one_is_greedy",
            beam1.tokens == greedy.tokens,
            format!("{} tokens", greedy.tokens.len()),
        ),
        CheckResult::new(
            "beam_monotonicity",
            monotone,
            format!("final score {:.4}", beam3.score),
        ),
        CheckResult::new(
            "determinism",
            again.tokens == greedy.tokens,
            "same config twice",
        ),
        CheckResult::new(
            "event_schedule",
            greedy.events.len() == 64 / cfg.sparsify_stride,
            format!("{} events", greedy.events.len()),
        ),
        CheckResult::new(
            "sparsify_shrinks_cache",
            shrinks,
            "rows_after < rows_before",
        ),
    ]
}

fn check_beta_zero() -> CheckResult {
    let mut rng = seed::rng(77);
    let mut cache = HeadCache::new(8);
    for p in 0..12 {
        let k: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        cache.push(
            &k,
            &v,
            RowMeta {
                position: p,
                aggregated: false,
                members: 1,
                received_mass: 0.0,
                image_fraction: 0.0,
                visual: 0.0,
                generated: false,
            },
        );
    }
    let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = softmax(&(0..12).map(|_| rng.gen_range(0.0..3.0)).collect::<Vec<_>>());
    let plain = attention_step(&q, &cache, None, 0.0).expect("attention");
    let zero = attention_step(&q, &cache, Some(&w), 0.0).expect("attention");
    CheckResult::new("beta_zero_noop", plain == zero, "bitwise comparison")
}

/// Constructed sink: column 0 collects most of the mass and has a positive
/// raw score. Its softmax share must drop after recalibration.
pub fn sink_damping_shares(beta: f64) -> (f64, f64) {
    let mass = [6.0, 0.5, 0.4, 0.6, 0.5];
    let raw = [2.0, 0.5, -0.3, 0.8, 0.1];
    let w = penalty_from_column_mass(&mass, beta)
        .expect("non-empty")
        .weights;
    let after = apply_penalty(&raw, &w, beta).expect("same length");
    (softmax(&raw)[0], softmax(&after)[0])
}

fn check_sink_damping() -> CheckResult {
    let (before, after) = sink_damping_shares(0.1);
    CheckResult::new(
        "sink_damping",
        after < before,
        format!("sink share {before:.6} -> {after:.6}"),
    )
}

fn check_density(sets: usize, root: u64) -> CheckResult {
    let worst = (0..sets)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::substream(root, &format!("discard-{i}")));
            let n = rng.gen_range(1..60);
            let dim = 8;
            let keys: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let values: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ids: Vec<usize> = (0..n).collect();
            let a = aggregate_discarded(&keys, &values, dim, &ids, DensityParams::default())
                .expect("valid discard set");
            (0..dim)
                .map(|d| {
                    let kin: f64 = (0..n).map(|r| keys[r * dim + d]).sum();
                    let kout: f64 = a.key_sums.iter().map(|r| r[d]).sum();
                    let vin: f64 = (0..n).map(|r| values[r * dim + d]).sum();
                    let vout: f64 = a.value_sums.iter().map(|r| r[d]).sum();
                    (kin - kout).abs().max((vin - vout).abs())
                })
                .fold(0.0, f64::max)
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0, f64::max);
    CheckResult::new(
        "density_conservation",
        worst <= 1e-9,
        format!("max |sum in - sum out| = {worst:e} over {sets} sets"),
    )
}

fn check_analysis(weights: &Arc<Weights>) -> Vec<CheckResult> {
    let task = small_task(weights, 8);
    let cfg = DecodeConfig {
        max_new_tokens: 64,
        ignore_eos: true,
        ..Default::default()
    };
    let s = start_recorded_session(
        Arc::clone(weights),
        &task.image_tokens,
        &task.prompt_tokens,
        &cfg,
    )
    .expect("session");
    let mut g = generate(s, &cfg).expect("generate");
    let dump = g.state.take_dump();
    let (record, modalities) = crate::model::record::split_dump(&dump);
    let seq = TokenSequence::from_modalities(modalities.unwrap_or_default()).expect("valid tags");
    let fractions: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
    let curve = recall_curve(&record, &fractions).expect("non-empty");
    let monotone = curve.recall_at_fraction.windows(2).all(|w| w[0] <= w[1])
        && *curve.recall_at_fraction.last().expect("non-empty") == 1.0;

    let report = detect_sinks(&record, &seq, 4.0).expect("non-empty");
    let mut reversed = record.clone();
    reversed.rows.reverse();
    let report_rev = detect_sinks(&reversed, &seq, 4.0).expect("non-empty");

    let sal = saliency_from_image_mass(&[0.3, 0.9, 0.1]);
    vec![
        CheckResult::new(
            "recall_monotone",
            monotone,
            format!("{} heads", record.heads().len()),
        ),
        CheckResult::new(
            "sinks_row_permutation_invariant",
            report.sinks() == report_rev.sinks(),
            format!("{} sinks", report.sinks().len()),
        ),
        CheckResult::new(
            "saliency_normalized",
            (sal.0.iter().sum::<f64>() - 1.0).abs() < 1e-12,
            "softmax output",
        ),
    ]
}

fn check_causality(weights: &Arc<Weights>) -> CheckResult {
    let task = small_task(weights, 3);
    let gen: Vec<usize> = (1..=12).collect();
    let mut altered = gen.clone();
    for t in altered.iter_mut().skip(6) {
        *t = (*t * 7) % weights.config.vocab_size;
    }
    let a = full_forward_logits(
        weights,
        &TokenSequence::from_parts(&task.image_tokens, &task.prompt_tokens, &gen),
    );
    let b = full_forward_logits(
        weights,
        &TokenSequence::from_parts(&task.image_tokens, &task.prompt_tokens, &altered),
    );
    let cut = task.prompt_len() + 6;
    let same = a[..cut] == b[..cut];
    CheckResult::new("causality", same, format!("first {cut} positions compared"))
}

/// Runs every property and oracle check.
pub fn run_verify(opts: &VerifyOptions) -> crate::error::Result<VerifyReport> {
    opts.model.validate()?;
    if opts.max_len == 0 || opts.max_len > crate::selection::MAX_ORACLE_LEN {
        return Err(crate::error::Error::Config(format!(
            "max_len must lie in 1..={}",
            crate::selection::MAX_ORACLE_LEN
        )));
    }
    let weights = Arc::new(Weights::init(&opts.model)?);
    let rows = oracle_rows(opts.instances, opts.max_len, opts.seed);
    let unequal = rows.iter().filter(|r| !r.equal).count();
    let mut checks = vec![CheckResult::new(
        "greedy_matches_exhaustive",
        unequal == 0,
        format!("{unequal} of {} instances differ", rows.len()),
    )];
    checks.push(check_exchange(opts.instances, opts.max_len, opts.seed));
    checks.push(check_cache_free(&weights, &[0, 1, 2]));
    checks.push(check_baseline(&weights, &[0, 1, 2]));
    checks.push(check_normalization(&weights, 128));
    checks.extend(check_contrastive(&weights));
    checks.extend(check_generation(&weights));
    checks.push(check_beta_zero());
    checks.push(check_sink_damping());
    checks.push(check_density(100, opts.seed));
    checks.extend(check_analysis(&weights));
    checks.push(check_causality(&weights));
    Ok(VerifyReport {
        checks,
        oracle_rows: rows,
    })
}
