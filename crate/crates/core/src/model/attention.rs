use crate::calibration::apply_penalty_in_place;
use crate::error::{ensure_len, Error, Result};
use crate::linalg::{dot, softmax_in_place};
use crate::model::cache::HeadCache;

/// Post-softmax scores over the cached rows and the attended value mix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub scores: Vec<f64>,
    pub context: Vec<f64>,
}

/// Single-query attention over one head's cache.
///
/// Raw scores are `q·K^T / sqrt(head_dim)`. When `penalty` is given and
/// `beta != 0` they are recalibrated as `(1+beta)s - beta(W⊙s)` before the
/// softmax; with `beta == 0` the penalty is skipped entirely.
pub fn attention_step(
    query: &[f64],
    cache: &HeadCache,
    penalty: Option<&[f64]>,
    beta: f64,
) -> Result<AttentionOutput> {
    if cache.is_empty() {
        return Err(Error::EmptyInput("attention over an empty cache"));
    }
    let d = cache.head_dim();
    ensure_len("query", d, query.len())?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores: Vec<f64> = (0..cache.len())
        .map(|r| dot(query, cache.key(r)) * scale)
        .collect();
    if let Some(w) = penalty {
        ensure_len("penalty weights", cache.len(), w.len())?;
        if beta != 0.0 {
            apply_penalty_in_place(&mut scores, w, beta);
        }
    }
    softmax_in_place(&mut scores);

    let mut context = vec![0.0; d];
    for (r, a) in scores.iter().enumerate() {
        for (c, v) in context.iter_mut().zip(cache.value(r)) {
            *c += a * v;
        }
    }
    Ok(AttentionOutput { scores, context })
}
