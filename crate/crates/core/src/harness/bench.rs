//! Grounding and throughput benchmarks.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoding::{generate, start_session, DecodeConfig, Generation};
use crate::error::{Error, Result};
use crate::harness::{GroundingTask, RunConfig, TaskConfig};
use crate::model::Weights;
use crate::par::*;
use crate::seed;

/// A named decoding configuration compared in a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub config: DecodeConfig,
}

impl Arm {
    pub fn new(name: impl Into<String>, config: DecodeConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }

    /// Unmodified decoder, vanilla attention-only pruning, and the full
    /// visual-aware method at `config`'s settings.
    pub fn grounding_arms(config: &DecodeConfig) -> Vec<Arm> {
        let keep = |mut c: DecodeConfig| {
            c.max_new_tokens = config.max_new_tokens;
            c.mode = config.mode;
            c.beam_size = config.beam_size;
            c.sparsify_stride = config.sparsify_stride;
            c.ignore_eos = config.ignore_eos;
            c
        };
        vec![
            Arm::new("baseline", keep(DecodeConfig::baseline())),
            Arm::new(
                "vanilla_topk",
                keep(DecodeConfig::vanilla_top_k(config.sparsity_fraction)),
            ),
            Arm::new("vasparse", config.clone()),
        ]
    }

    /// One arm per value of `key`, each a copy of `base` with that field set.
    pub fn sweep(base: &DecodeConfig, key: &str, values: &[f64]) -> Result<Vec<Arm>> {
        values
            .iter()
            .map(|&v| {
                let mut c = base.clone();
                match key {
                    "fraction" | "sparsity_fraction" => c.sparsity_fraction = v,
                    "lambda" => c.lambda = v,
                    "alpha" => c.alpha = v,
                    "beta" => c.beta = v,
                    "visual_mask_rate" => c.visual_mask_rate = v,
                    "plausibility_threshold" => c.plausibility_threshold = v,
                    "max_new_tokens" => c.max_new_tokens = v as usize,
                    "beam_size" => c.beam_size = v as usize,
                    "sparsify_stride" | "stride" => c.sparsify_stride = v as usize,
                    other => return Err(Error::Config(format!("unknown sweep key `{other}`"))),
                }
                c.validate()?;
                Ok(Arm::new(format!("{key}={v}"), c))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub arm: String,
    pub seed: u64,
    /// Median tokens/second over the timed runs.
    pub tps: f64,
    pub tps_runs: Vec<f64>,
    pub warmup_tps: Option<f64>,
    pub hallucination_rate: f64,
    /// Unaggregated image-token rows kept, summed over all events and heads.
    pub image_tokens_kept: usize,
    pub generated_tokens: usize,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: usize,
    pub median_tps: f64,
    pub mean_tps: f64,
    pub mean_hallucination_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summaries: Vec<ArmSummary>,
    pub methodology: String,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,seed,tps,hallucination_rate,image_tokens_kept\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.3},{},{}",
                r.arm, r.seed, r.tps, r.hallucination_rate, r.image_tokens_kept
            );
        }
        s
    }

    pub fn summary(&self, arm: &str) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }

    fn summarize(rows: Vec<BenchRow>, arms: &[Arm], methodology: String) -> Self {
        let summaries = arms
            .iter()
            .map(|a| {
                let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.arm == a.name).collect();
                let all_tps: Vec<f64> = mine
                    .iter()
                    .flat_map(|r| r.tps_runs.iter().copied())
                    .collect();
                ArmSummary {
                    arm: a.name.clone(),
                    runs: all_tps.len(),
                    median_tps: median(&all_tps),
                    mean_tps: mean(&all_tps),
                    mean_hallucination_rate: mean(
                        &mine
                            .iter()
                            .map(|r| r.hallucination_rate)
                            .collect::<Vec<_>>(),
                    ),
                }
            })
            .collect();
        Self {
            rows,
            summaries,
            methodology,
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

struct TimedRun {
    generation: Generation,
    tps: f64,
}

fn timed_run(
    weights: &Arc<Weights>,
    task: &GroundingTask,
    config: &DecodeConfig,
) -> Result<TimedRun> {
    let state = start_session(
        Arc::clone(weights),
        &task.image_tokens,
        &task.prompt_tokens,
        config,
    )?;
    let start = Instant::now();
    let generation = generate(state, config)?;
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    let tps = generation.tokens.len() as f64 / secs;
    Ok(TimedRun { generation, tps })
}

fn row_from(
    arm: &Arm,
    seed: u64,
    task: &GroundingTask,
    runs: &[TimedRun],
    warmup: Option<f64>,
) -> BenchRow {
    let g = &runs[0].generation;
    let tps_runs: Vec<f64> = runs.iter().map(|r| r.tps).collect();
    BenchRow {
        arm: arm.name.clone(),
        seed,
        tps: median(&tps_runs),
        tps_runs,
        warmup_tps: warmup,
        hallucination_rate: task.hallucination_rate(&g.tokens),
        image_tokens_kept: g.events.iter().map(|e| e.image_rows_kept()).sum(),
        generated_tokens: g.tokens.len(),
        events: g.events.len(),
    }
}

fn arm_config(arm: &Arm, seed: u64) -> DecodeConfig {
    let mut c = arm.config.clone();
    c.rng_seed = seed::substream(seed, "visual-mask");
    c
}

/// Runs every arm once per seed on a shared task per seed. Seeds run in
/// parallel sessions, each with its own clock.
pub fn run_arms(
    weights: &Arc<Weights>,
    task_cfg: &TaskConfig,
    arms: &[Arm],
    seeds: &[u64],
) -> Result<BenchReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed".into()));
    }
    let vocab = weights.config.vocab_size;
    let per_seed: Vec<Result<Vec<BenchRow>>> = seeds
        .par_iter()
        .map(|&seed| {
            let task = GroundingTask::generate(vocab, task_cfg, RunConfig::task_seed(seed))?;
            arms.iter()
                .map(|arm| {
                    let run = timed_run(weights, &task, &arm_config(arm, seed))?;
                    Ok(row_from(arm, seed, &task, &[run], None))
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    let note = "tps = generated tokens / wall-clock seconds of the decode loop \
                (prompt ingestion excluded), one run per (arm, seed); seeds run \
                concurrently in a worker pool";
    Ok(BenchReport::summarize(rows, arms, note.to_string()))
}

/// Baseline vs vanilla top-K vs visual-aware arms over `num_tasks` seeds.
pub fn grounding_benchmark(
    weights: &Arc<Weights>,
    task_cfg: &TaskConfig,
    config: &DecodeConfig,
    num_tasks: usize,
    root_seed: u64,
) -> Result<BenchReport> {
    if num_tasks == 0 {
        return Err(Error::Config("num_tasks must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..num_tasks as u64).map(|i| root_seed + i).collect();
    run_arms(weights, task_cfg, &Arm::grounding_arms(config), &seeds)
}

/// Throughput protocol: per seed, one warm-up round then `repeats` timed
/// rounds, each round running every arm back to back so arms are paired in
/// time. Runs are sequential and ignore the end token so every run produces
/// `max_new_tokens` tokens.
pub fn tps_bench(
    weights: &Arc<Weights>,
    task_cfg: &TaskConfig,
    arms: &[Arm],
    seeds: &[u64],
    repeats: usize,
) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::Config("tps_bench needs at least 3 repeats".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed".into()));
    }
    let vocab = weights.config.vocab_size;
    let mut rows = Vec::new();
    for &seed in seeds {
        let task = GroundingTask::generate(vocab, task_cfg, RunConfig::task_seed(seed))?;
        let configs: Vec<DecodeConfig> = arms
            .iter()
            .map(|a| DecodeConfig {
                ignore_eos: true,
                ..arm_config(a, seed)
            })
            .collect();
        let mut warmups = Vec::with_capacity(arms.len());
        let mut runs: Vec<Vec<TimedRun>> = arms.iter().map(|_| Vec::new()).collect();
        for round in 0..=repeats {
            for (i, c) in configs.iter().enumerate() {
                let run = timed_run(weights, &task, c)?;
                if round == 0 {
                    warmups.push(run.tps);
                } else {
                    runs[i].push(run);
                }
            }
        }
        for (i, arm) in arms.iter().enumerate() {
            rows.push(row_from(arm, seed, &task, &runs[i], Some(warmups[i])));
        }
    }
    let note = format!(
        "tps = generated tokens / wall-clock seconds of the decode loop (prompt \
         ingestion excluded); 1 warm-up round + {repeats} timed rounds per seed, \
         arms interleaved within each round; end token ignored; median reported"
    );
    Ok(BenchReport::summarize(rows, arms, note))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn weights() -> Arc<Weights> {
        let cfg = ModelConfig {
            vocab_size: 64,
            embed_dim: 16,
            num_heads: 2,
            head_dim: 8,
            num_layers: 2,
            max_seq_len: 256,
            rng_seed: 3,
        };
        Arc::new(Weights::init(&cfg).unwrap())
    }

    fn small_task() -> TaskConfig {
        TaskConfig {
            num_grounded: 8,
            num_image_tokens: 12,
            num_prompt_tokens: 4,
        }
    }

    #[test]
    fn grounding_rows_are_arms_times_seeds() {
        let cfg = DecodeConfig {
            max_new_tokens: 16,
            sparsify_stride: 4,
            ..Default::default()
        };
        let r = grounding_benchmark(&weights(), &small_task(), &cfg, 3, 10).unwrap();
        assert_eq!(r.rows.len(), 9);
        assert!(r.rows.iter().all(|row| row.tps > 0.0));
        assert!(r
            .rows
            .iter()
            .all(|row| (0.0..=1.0).contains(&row.hallucination_rate)));
        assert_eq!(r.summaries.len(), 3);
        assert_eq!(r.to_csv().lines().count(), 10);
    }

    #[test]
    fn full_fraction_arm_reproduces_baseline() {
        let cfg = DecodeConfig {
            max_new_tokens: 16,
            sparsify_stride: 4,
            sparsity_fraction: 1.0,
            ..Default::default()
        };
        let arms = Arm::grounding_arms(&cfg);
        let r = run_arms(&weights(), &small_task(), &arms[..2], &[1, 2]).unwrap();
        for seed in [1, 2] {
            let pick = |a: &str| {
                r.rows
                    .iter()
                    .find(|x| x.arm == a && x.seed == seed)
                    .unwrap()
                    .hallucination_rate
            };
            assert_eq!(pick("baseline"), pick("vanilla_topk"));
        }
    }

    #[test]
    fn sweep_builds_one_arm_per_value() {
        let arms =
            Arm::sweep(&DecodeConfig::default(), "fraction", &[0.5, 0.75, 0.9, 1.0]).unwrap();
        assert_eq!(arms.len(), 4);
        assert_eq!(arms[1].config.sparsity_fraction, 0.75);
        assert!(Arm::sweep(&DecodeConfig::default(), "nope", &[1.0]).is_err());
        assert!(Arm::sweep(&DecodeConfig::default(), "fraction", &[1.5]).is_err());
    }

    #[test]
    fn tps_protocol_records_warmup_and_repeats() {
        let cfg = DecodeConfig {
            max_new_tokens: 1,
            ..Default::default()
        };
        let arms = vec![Arm::new("one", cfg)];
        let r = tps_bench(&weights(), &small_task(), &arms, &[0], 5).unwrap();
        let row = &r.rows[0];
        assert_eq!(row.tps_runs.len(), 5);
        assert!(row.warmup_tps.is_some());
        assert!(row.tps.is_finite() && row.tps > 0.0);
        assert!(tps_bench(&weights(), &small_task(), &arms, &[0], 2).is_err());
    }
}
