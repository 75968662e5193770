//! Grounding tasks, benchmark drivers, independent oracles and the
//! verification suite behind the CLI.

pub mod bench;
pub mod oracles;
pub mod verify;

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, EOS_TOKEN};
use crate::seed;

pub use bench::{grounding_benchmark, run_arms, tps_bench, Arm, ArmSummary, BenchReport, BenchRow};
pub use verify::{run_verify, CheckResult, OracleRow, VerifyOptions, VerifyReport};

/// Shape of synthetic grounding tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub num_grounded: usize,
    pub num_image_tokens: usize,
    pub num_prompt_tokens: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_grounded: 16,
            num_image_tokens: 32,
            num_prompt_tokens: 8,
        }
    }
}

/// One synthetic image-plus-prompt instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingTask {
    /// Token ids considered faithful to the "image".
    pub grounded: BTreeSet<usize>,
    pub image_tokens: Vec<usize>,
    pub prompt_tokens: Vec<usize>,
    pub seed: u64,
}

impl GroundingTask {
    /// Draws a task; ids never include the end-of-sequence token.
    pub fn generate(vocab_size: usize, cfg: &TaskConfig, seed: u64) -> Result<Self> {
        let usable = vocab_size.saturating_sub(1);
        if cfg.num_grounded == 0 || cfg.num_grounded > usable {
            return Err(Error::Config(format!(
                "num_grounded must lie in 1..={usable}"
            )));
        }
        if cfg.num_image_tokens == 0 {
            return Err(Error::Config("num_image_tokens must be positive".into()));
        }
        let mut rng = seed::rng(seed);
        let grounded: BTreeSet<usize> = index::sample(&mut rng, usable, cfg.num_grounded)
            .into_iter()
            .map(|i| i + 1)
            .collect();
        let pool: Vec<usize> = grounded.iter().copied().collect();
        let image_tokens = (0..cfg.num_image_tokens)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect();
        let prompt_tokens = (0..cfg.num_prompt_tokens)
            .map(|_| rng.gen_range(1..vocab_size))
            .collect();
        Ok(Self {
            grounded,
            image_tokens,
            prompt_tokens,
            seed,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.image_tokens.len() + self.prompt_tokens.len()
    }

    /// Share of generated tokens (end token excluded) outside the grounded
    /// set. Zero when nothing was generated.
    pub fn hallucination_rate(&self, tokens: &[usize]) -> f64 {
        let content: Vec<usize> = tokens.iter().copied().filter(|t| *t != EOS_TOKEN).collect();
        if content.is_empty() {
            return 0.0;
        }
        let outside = content
            .iter()
            .filter(|t| !self.grounded.contains(t))
            .count();
        outside as f64 / content.len() as f64
    }
}

/// Everything a CLI run needs: model keys at the top level plus optional
/// `decode` and `task` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub task: TaskConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            decode: DecodeConfig::default(),
            task: TaskConfig::default(),
        }
    }
}

impl RunConfig {
    /// Re-derives every seed from one root through named sub-streams.
    pub fn reseed(mut self, root: u64) -> Self {
        self.model.rng_seed = seed::substream(root, "model");
        self.decode.rng_seed = seed::substream(root, "visual-mask");
        self
    }

    pub fn task_seed(root: u64) -> u64 {
        seed::substream(root, "tasks")
    }
}
