//! Decoding pipeline: sparse visual contrastive logits, the plausibility
//! constraint, the sparsification schedule and greedy/beam generation.

mod generate;
mod schedule;

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::PenaltyScope;
use crate::error::{Error, Result};
use crate::linalg::{self, softmax};
use crate::model::{Calibration, DecoderState, Modality, Weights};
use crate::selection::{DensityParams, SaliencySource};

pub use generate::{generate, BeamHypothesis, Generation, StepRecord, Transcript};
pub use schedule::{sparsify_event, HeadEvent, SparsifyEvent};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam,
}

/// How the masked embedding sequence is reduced to one vector for the
/// LM-head-only contrastive path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

/// What happens to the image embeddings chosen by the random visual mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMaskMode {
    /// Replace with zeros; the sequence length is unchanged.
    #[default]
    Zero,
    /// Drop the positions.
    Remove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub max_new_tokens: usize,
    /// Saliency weight in the selection score.
    pub lambda: f64,
    /// Contrastive strength.
    pub alpha: f64,
    /// Sink-penalty strength.
    pub beta: f64,
    /// Kept fraction of cached rows at each sparsification event.
    pub sparsity_fraction: f64,
    /// Fraction of image embeddings masked for the contrastive path.
    pub visual_mask_rate: f64,
    pub plausibility_threshold: f64,
    /// Generated tokens between sparsification events.
    pub sparsify_stride: usize,
    pub rng_seed: u64,
    pub pooling: Pooling,
    pub visual_mask_mode: VisualMaskMode,
    pub saliency_source: SaliencySource,
    pub penalty_scope: PenaltyScope,
    pub density: DensityParams,
    /// Scale the attention term of the selection score by the sink weights.
    pub weight_delta_by_penalty: bool,
    pub ignore_eos: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_size: 2,
            max_new_tokens: 64,
            lambda: 0.1,
            alpha: 0.1,
            beta: 0.1,
            sparsity_fraction: 0.9,
            visual_mask_rate: 0.5,
            plausibility_threshold: 0.1,
            sparsify_stride: 16,
            rng_seed: 0,
            pooling: Pooling::Mean,
            visual_mask_mode: VisualMaskMode::Zero,
            saliency_source: SaliencySource::LastHead,
            penalty_scope: PenaltyScope::All,
            density: DensityParams::default(),
            weight_delta_by_penalty: false,
            ignore_eos: false,
        }
    }
}

impl DecodeConfig {
    /// Every mechanism off: plain greedy decoding on the unmodified model.
    pub fn baseline() -> Self {
        Self {
            lambda: 0.0,
            alpha: 0.0,
            beta: 0.0,
            sparsity_fraction: 1.0,
            ..Self::default()
        }
    }

    /// Attention-only top-K pruning: no saliency, penalty or contrast.
    pub fn vanilla_top_k(fraction: f64) -> Self {
        Self {
            lambda: 0.0,
            alpha: 0.0,
            beta: 0.0,
            sparsity_fraction: fraction,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.sparsity_fraction > 0.0 && self.sparsity_fraction <= 1.0) {
            return bad("sparsity_fraction must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.visual_mask_rate) {
            return bad("visual_mask_rate must lie in [0, 1)");
        }
        if !(self.plausibility_threshold > 0.0 && self.plausibility_threshold < 1.0) {
            return bad("plausibility_threshold must lie in (0, 1)");
        }
        if self.beam_size == 0 {
            return bad("beam_size must be at least 1");
        }
        if self.sparsify_stride == 0 {
            return bad("sparsify_stride must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return bad("alpha and beta must be finite");
        }
        Ok(())
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            beta: self.beta,
            scope: self.penalty_scope,
        }
    }
}

/// Paired vocabulary logits of one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    /// Full (sparsified) decoder path.
    pub logit_theta: Vec<f64>,
    /// LM-head-only path over masked visual embeddings. Empty until set.
    pub logit_phi: Vec<f64>,
    /// `(1+alpha) theta - alpha phi`, `-inf` where implausible.
    pub combined: Vec<f64>,
    pub plausible: Vec<bool>,
}

impl LogitRecord {
    pub fn from_theta(logits: Vec<f64>) -> Self {
        let n = logits.len();
        Self {
            combined: logits.clone(),
            logit_theta: logits,
            logit_phi: Vec::new(),
            plausible: vec![true; n],
        }
    }

    pub fn survivors(&self) -> usize {
        self.plausible.iter().filter(|p| **p).count()
    }
}

/// Picks `round(rate * n_image)` image positions to mask.
pub fn draw_visual_mask<R: Rng>(rng: &mut R, n_image: usize, rate: f64) -> Vec<bool> {
    let count = ((rate * n_image as f64).round() as usize).min(n_image);
    let mut mask = vec![false; n_image];
    for i in index::sample(rng, n_image, count) {
        mask[i] = true;
    }
    mask
}

/// Contrastive logits from the state's latest full-path logits and the
/// LM head applied to the pooled input embeddings with `visual_mask`
/// applied to the image prefix.
pub fn contrastive_logits(
    state: &DecoderState,
    config: &DecodeConfig,
    visual_mask: &[bool],
) -> Result<LogitRecord> {
    let seq = state.sequence();
    let n_image = seq.image_len();
    if n_image == 0 {
        return Err(Error::Degenerate("contrastive decoding needs image tokens"));
    }
    crate::error::ensure_len("visual mask", n_image, visual_mask.len())?;
    let theta = state
        .last_logits()
        .ok_or(Error::Precondition(
            "no logits yet; ingest the prompt first",
        ))?
        .to_vec();

    let pooled = pooled_embedding(state, config, visual_mask);
    let phi = state.lm_head_only(std::slice::from_ref(&pooled))?;
    let alpha = config.alpha;
    let combined = if alpha == 0.0 {
        theta.clone()
    } else {
        theta
            .iter()
            .zip(&phi)
            .map(|(t, p)| (1.0 + alpha) * t - alpha * p)
            .collect()
    };
    let n = theta.len();
    Ok(LogitRecord {
        logit_theta: theta,
        logit_phi: phi,
        combined,
        plausible: vec![true; n],
    })
}

fn pooled_embedding(state: &DecoderState, config: &DecodeConfig, visual_mask: &[bool]) -> Vec<f64> {
    let seq = state.sequence();
    let weights: &Arc<Weights> = state.weights();
    let masked = |pos: usize| pos < visual_mask.len() && visual_mask[pos];
    match config.pooling {
        Pooling::Last => {
            let pos = seq.len() - 1;
            let modality = seq.modalities()[pos];
            if masked(pos) {
                vec![0.0; state.config().embed_dim]
            } else {
                weights
                    .token_embedding(seq.tokens()[pos], modality)
                    .to_vec()
            }
        }
        Pooling::Mean => {
            let mut sum = state.embedding_sum.clone();
            let mut removed = 0usize;
            for (pos, &tok) in seq.tokens()[..visual_mask.len()].iter().enumerate() {
                if visual_mask[pos] {
                    let e = weights.token_embedding(tok, Modality::Image);
                    for (s, v) in sum.iter_mut().zip(e) {
                        *s -= v;
                    }
                    removed += 1;
                }
            }
            let count = match config.visual_mask_mode {
                VisualMaskMode::Zero => seq.len(),
                VisualMaskMode::Remove => seq.len() - removed,
            };
            let inv = 1.0 / count.max(1) as f64;
            sum.iter().map(|s| s * inv).collect()
        }
    }
}

/// Keeps tokens with `p_theta >= threshold * max p_theta`; everything else
/// becomes `-inf` in the combined logits.
pub fn plausibility_filter(mut record: LogitRecord, threshold: f64) -> LogitRecord {
    let p = softmax(&record.logit_theta);
    let max = p.iter().copied().fold(0.0, f64::max);
    let cutoff = threshold * max;
    record.plausible = p.iter().map(|pi| *pi >= cutoff).collect();
    for (c, keep) in record.combined.iter_mut().zip(&record.plausible) {
        if !keep {
            *c = f64::NEG_INFINITY;
        }
    }
    record
}

/// Creates a session configured for `config` and ingests the prompt.
pub fn start_session(
    weights: Arc<Weights>,
    image: &[usize],
    prompt: &[usize],
    config: &DecodeConfig,
) -> Result<DecoderState> {
    open_session(weights, image, prompt, config, false)
}

/// Like [`start_session`], with the attention dump enabled before the
/// prompt is ingested so the dump covers every position.
pub fn start_recorded_session(
    weights: Arc<Weights>,
    image: &[usize],
    prompt: &[usize],
    config: &DecodeConfig,
) -> Result<DecoderState> {
    open_session(weights, image, prompt, config, true)
}

fn open_session(
    weights: Arc<Weights>,
    image: &[usize],
    prompt: &[usize],
    config: &DecodeConfig,
    dump: bool,
) -> Result<DecoderState> {
    let mut state = DecoderState::from_weights(weights);
    state.set_calibration(config.calibration());
    state.set_saliency_source(config.saliency_source);
    if dump {
        state.enable_dump();
    }
    state.ingest_prompt(image, prompt)?;
    Ok(state)
}

pub(crate) fn greedy_pick(record: &LogitRecord) -> usize {
    linalg::argmax(&record.combined)
}
