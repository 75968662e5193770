//! Command-line front end: `decode`, `bench`, `analyze` and `verify`.

use std::ffi::OsString;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use vasparse::analysis::{detect_sinks, modality_density, recall_curve, DEFAULT_SINK_MULTIPLE};
use vasparse::decoding::{generate, start_recorded_session, start_session, Transcript};
use vasparse::harness::{
    run_arms, run_verify, tps_bench, Arm, GroundingTask, RunConfig, VerifyOptions,
};
use vasparse::model::record::{read_jsonl, split_dump, write_jsonl};
use vasparse::model::{TokenSequence, Weights};

/// Usage errors and invalid input.
pub const EXIT_USAGE: i32 = 2;
/// A verification check failed, or a run failed at runtime.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "vasparse",
    version,
    about = "Visual-aware sparse decoding on a toy multimodal decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode one synthetic task and write transcript.json.
    Decode(DecodeArgs),
    /// Run benchmark arms and write metrics.csv and summary.json.
    Bench(BenchArgs),
    /// Analyze an attention dump and write recall, sink and density CSVs.
    Analyze(AnalyzeArgs),
    /// Run the oracle and property suite and write oracle.csv.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config: model keys plus optional `decode` and `task` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; model, task and visual-mask seeds derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    /// Also write attention.jsonl.
    #[arg(long)]
    dump: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// One arm per value, e.g. `fraction=0.5,0.75,0.9,1.0`.
    #[arg(long)]
    sweep: Option<String>,
    /// Number of consecutive seeds starting at the root seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Use the throughput protocol with this many timed rounds per seed.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Attention dump written by `decode --dump`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SINK_MULTIPLE)]
    sink_multiple: f64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Decode(a) => decode(a),
        Command::Bench(a) => bench(a),
        Command::Analyze(a) => analyze(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .downcast_ref::<vasparse::Error>()
                .is_some_and(|e| matches!(e, vasparse::Error::Config(_)))
                || e.downcast_ref::<serde_json::Error>().is_some();
            if usage {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.reseed(seed);
    }
    cfg.model.validate()?;
    cfg.decode.validate()?;
    Ok(cfg)
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: PathBuf, contents: &str) -> anyhow::Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn decode(args: DecodeArgs) -> anyhow::Result<i32> {
    let cfg = load_config(&args.common)?;
    out_dir(&args.common.out)?;
    let weights = Arc::new(Weights::init(&cfg.model)?);
    let task = GroundingTask::generate(
        cfg.model.vocab_size,
        &cfg.task,
        RunConfig::task_seed(args.common.seed.unwrap_or(0)),
    )?;
    let open = if args.dump {
        start_recorded_session
    } else {
        start_session
    };
    let state = open(
        weights,
        &task.image_tokens,
        &task.prompt_tokens,
        &cfg.decode,
    )?;
    let mut generation = generate(state, &cfg.decode)?;
    let transcript = Transcript::new(&generation, &cfg.decode);
    write(
        args.common.out.join("transcript.json"),
        &transcript.to_json()?,
    )?;
    if args.dump {
        let path = args.common.out.join("attention.jsonl");
        let file =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_jsonl(std::io::BufWriter::new(file), &generation.state.take_dump())?;
    }
    println!(
        "decoded {} tokens, {} sparsify events, hallucination rate {:.3}",
        generation.tokens.len(),
        generation.events.len(),
        task.hallucination_rate(&generation.tokens)
    );
    Ok(0)
}

fn parse_sweep(spec: &str) -> anyhow::Result<(String, Vec<f64>)> {
    let Some((key, values)) = spec.split_once('=') else {
        bail!(vasparse::Error::Config(format!(
            "sweep `{spec}` must look like key=v1,v2"
        )));
    };
    let values = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| vasparse::Error::Config(format!("sweep value `{v}` is not a number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((key.trim().to_string(), values))
}

fn bench(args: BenchArgs) -> anyhow::Result<i32> {
    let cfg = load_config(&args.common)?;
    if args.seeds == 0 {
        bail!(vasparse::Error::Config("--seeds must be at least 1".into()));
    }
    out_dir(&args.common.out)?;
    let weights = Arc::new(Weights::init(&cfg.model)?);
    let arms = match &args.sweep {
        Some(spec) => {
            let (key, values) = parse_sweep(spec)?;
            Arm::sweep(&cfg.decode, &key, &values)?
        }
        None => Arm::grounding_arms(&cfg.decode),
    };
    let root = args.common.seed.unwrap_or(0);
    let seeds: Vec<u64> = (root..root + args.seeds).collect();
    let report = match args.repeats {
        Some(r) => tps_bench(&weights, &cfg.task, &arms, &seeds, r)?,
        None => run_arms(&weights, &cfg.task, &arms, &seeds)?,
    };
    write(args.common.out.join("metrics.csv"), &report.to_csv())?;
    write(
        args.common.out.join("summary.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    for s in &report.summaries {
        println!(
            "{:<24} median tps {:>10.1}  hallucination {:.3}",
            s.arm, s.median_tps, s.mean_hallucination_rate
        );
    }
    Ok(0)
}

fn analyze(args: AnalyzeArgs) -> anyhow::Result<i32> {
    let file =
        fs::File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
    let records = read_jsonl(BufReader::new(file))?;
    let (record, modalities) = split_dump(&records);
    let Some(modalities) = modalities else {
        bail!(vasparse::Error::Config(
            "dump has no sequence record".into()
        ));
    };
    let sequence = TokenSequence::from_modalities(modalities)?;
    out_dir(&args.out)?;
    let fractions: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    let curve = recall_curve(&record, &fractions)?;
    let sinks = detect_sinks(&record, &sequence, args.sink_multiple)?;
    let density = modality_density(&record, &sequence, args.bins)?;
    write(args.out.join("recall.csv"), &curve.to_csv())?;
    write(args.out.join("sinks.csv"), &sinks.to_csv())?;
    write(args.out.join("density.csv"), &density.to_csv())?;
    println!(
        "{} score rows, recall at 10% kept {:.4}, sinks at {:?}",
        record.rows.len(),
        curve.recall_at_fraction[9],
        sinks.sinks()
    );
    Ok(0)
}

fn verify(args: VerifyArgs) -> anyhow::Result<i32> {
    let report = run_verify(&VerifyOptions {
        instances: args.instances,
        max_len: args.max_len,
        seed: args.seed,
        ..Default::default()
    })?;
    out_dir(&args.out)?;
    write(args.out.join("oracle.csv"), &report.oracle_csv())?;
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(if report.passed() { 0 } else { EXIT_FAILURE })
}
