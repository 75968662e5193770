use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decoding::{
    contrastive_logits, draw_visual_mask, greedy_pick, plausibility_filter, sparsify_event,
    DecodeConfig, DecodeMode, LogitRecord, SparsifyEvent,
};
use crate::error::{Error, Result};
use crate::linalg::log_softmax;
use crate::model::{DecoderState, ModelConfig, EOS_TOKEN};
use crate::par::*;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub token: usize,
    pub logits: Arc<LogitRecord>,
    /// Log-probability of `token` under the filtered combined logits.
    pub log_prob: f64,
    /// Whether a sparsification event ran after this token was fed.
    pub sparsified: bool,
}

/// A live beam entry.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub state: DecoderState,
    pub steps: Vec<StepRecord>,
    pub events: Vec<SparsifyEvent>,
    pub finished: bool,
}

/// Result of one `generate` call.
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub events: Vec<SparsifyEvent>,
    /// Cumulative log-probability of `tokens`.
    pub score: f64,
    /// Best live hypothesis score after every step.
    pub score_trace: Vec<f64>,
    /// Session state after the last fed token.
    pub state: DecoderState,
}

/// Autoregressive generation from an already prompted session.
pub fn generate(state: DecoderState, config: &DecodeConfig) -> Result<Generation> {
    config.validate()?;
    if state.sequence().is_empty() {
        return Err(Error::Precondition(
            "prompt must be ingested before generating",
        ));
    }
    let needed = state.sequence().len() + config.max_new_tokens;
    if needed > state.config().max_seq_len {
        return Err(Error::Config(format!(
            "prompt plus max_new_tokens needs {needed} positions, max_seq_len is {}",
            state.config().max_seq_len
        )));
    }
    let mut state = state;
    state.set_calibration(config.calibration());
    match config.mode {
        DecodeMode::Greedy => greedy(state, config),
        DecodeMode::Beam => beam(state, config),
    }
}

fn feed(
    state: &mut DecoderState,
    token: usize,
    produced: usize,
    config: &DecodeConfig,
) -> Result<Option<SparsifyEvent>> {
    state.decode_step(token)?;
    if produced.is_multiple_of(config.sparsify_stride) {
        Ok(Some(sparsify_event(state, config, produced)?))
    } else {
        Ok(None)
    }
}

fn step_logits(state: &DecoderState, config: &DecodeConfig, mask: &[bool]) -> Result<LogitRecord> {
    let rec = contrastive_logits(state, config, mask)?;
    Ok(plausibility_filter(rec, config.plausibility_threshold))
}

fn greedy(mut state: DecoderState, config: &DecodeConfig) -> Result<Generation> {
    let mut rng = seed::rng(config.rng_seed);
    let n_image = state.sequence().image_len();
    let mut tokens = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut events = Vec::new();
    let mut score = 0.0;
    let mut trace = Vec::new();

    for t in 0..config.max_new_tokens {
        let mask = draw_visual_mask(&mut rng, n_image, config.visual_mask_rate);
        let rec = step_logits(&state, config, &mask)?;
        let token = greedy_pick(&rec);
        let log_prob = log_softmax(&rec.combined)[token];
        score += log_prob;
        trace.push(score);
        tokens.push(token);
        steps.push(StepRecord {
            token,
            logits: Arc::new(rec),
            log_prob,
            sparsified: false,
        });
        if token == EOS_TOKEN && !config.ignore_eos {
            break;
        }
        if let Some(ev) = feed(&mut state, token, t + 1, config)? {
            events.push(ev);
            steps.last_mut().expect("just pushed").sparsified = true;
        }
    }
    Ok(Generation {
        tokens,
        steps,
        events,
        score,
        score_trace: trace,
        state,
    })
}

struct Candidate {
    parent: usize,
    token: usize,
    score: f64,
    log_prob: f64,
    logits: Arc<LogitRecord>,
}

fn beam(state: DecoderState, config: &DecodeConfig) -> Result<Generation> {
    let width = config.beam_size;
    let mut rng = seed::rng(config.rng_seed);
    let n_image = state.sequence().image_len();
    let mut active = vec![BeamHypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state,
        steps: Vec::new(),
        events: Vec::new(),
        finished: false,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    let mut trace = Vec::new();

    for t in 0..config.max_new_tokens {
        let mask = draw_visual_mask(&mut rng, n_image, config.visual_mask_rate);
        let expansions: Vec<Result<Vec<Candidate>>> = active
            .par_iter()
            .enumerate()
            .map(|(parent, hyp)| {
                let rec = Arc::new(step_logits(&hyp.state, config, &mask)?);
                let lp = log_softmax(&rec.combined);
                let mut order: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                Ok(order
                    .into_iter()
                    .take(width)
                    .map(|token| Candidate {
                        parent,
                        token,
                        score: hyp.score + lp[token],
                        log_prob: lp[token],
                        logits: Arc::clone(&rec),
                    })
                    .collect())
            })
            .collect();
        let mut candidates = Vec::new();
        for e in expansions {
            candidates.extend(e?);
        }
        candidates.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.parent.cmp(&b.parent))
                .then(a.token.cmp(&b.token))
        });
        candidates.truncate(width);

        let mut next: Vec<BeamHypothesis> = candidates
            .into_iter()
            .map(|c| {
                let parent = &active[c.parent];
                let mut steps = parent.steps.clone();
                steps.push(StepRecord {
                    token: c.token,
                    logits: c.logits,
                    log_prob: c.log_prob,
                    sparsified: false,
                });
                let mut tokens = parent.tokens.clone();
                tokens.push(c.token);
                BeamHypothesis {
                    tokens,
                    score: c.score,
                    state: parent.state.clone(),
                    steps,
                    events: parent.events.clone(),
                    finished: c.token == EOS_TOKEN && !config.ignore_eos,
                }
            })
            .collect();
        trace.push(next[0].score);

        let fed: Vec<Result<()>> = next
            .par_iter_mut()
            .filter(|h| !h.finished)
            .map(|h| {
                let token = *h.tokens.last().expect("one token per step");
                if let Some(ev) = feed(&mut h.state, token, t + 1, config)? {
                    h.events.push(ev);
                    h.steps.last_mut().expect("one step per token").sparsified = true;
                }
                Ok(())
            })
            .collect();
        fed.into_iter().collect::<Result<Vec<()>>>()?;

        let (done, live): (Vec<_>, Vec<_>) = next.into_iter().partition(|h| h.finished);
        finished.extend(done);
        active = live;
        if active.is_empty() {
            break;
        }
    }

    let best = finished
        .into_iter()
        .chain(active)
        .reduce(|a, b| if b.score > a.score { b } else { a })
        .expect("beam never empties before producing a hypothesis");
    Ok(Generation {
        tokens: best.tokens,
        steps: best.steps,
        events: best.events,
        score: best.score,
        score_trace: trace,
        state: best.state,
    })
}

/// Per-step summary in the transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptStep {
    pub logit_argmax: usize,
    pub plausibility_survivors: usize,
    pub event_flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub step: usize,
    pub heads: usize,
    pub kept: usize,
    pub pruned: usize,
    pub clusters: usize,
    pub image_rows_kept: usize,
    pub per_head: Vec<crate::decoding::HeadEvent>,
}

/// JSON decode transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub config: DecodeConfig,
    pub model: ModelConfig,
    pub tokens: Vec<usize>,
    pub per_step: Vec<TranscriptStep>,
    pub events: Vec<TranscriptEvent>,
}

impl Transcript {
    pub fn new(generation: &Generation, config: &DecodeConfig) -> Self {
        let per_step = generation
            .steps
            .iter()
            .map(|s| TranscriptStep {
                logit_argmax: crate::linalg::argmax(&s.logits.combined),
                plausibility_survivors: s.logits.survivors(),
                event_flags: if s.sparsified {
                    vec!["sparsify".to_string()]
                } else {
                    Vec::new()
                },
            })
            .collect();
        let events = generation
            .events
            .iter()
            .map(|e| TranscriptEvent {
                step: e.step,
                heads: e.heads.len(),
                kept: e.kept(),
                pruned: e.pruned(),
                clusters: e.clusters(),
                image_rows_kept: e.image_rows_kept(),
                per_head: e.heads.clone(),
            })
            .collect();
        Self {
            config: config.clone(),
            model: generation.state.config().clone(),
            tokens: generation.tokens.clone(),
            per_step,
            events,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
