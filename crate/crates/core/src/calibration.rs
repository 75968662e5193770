//! Sink-penalty weights from cumulative column attention and the score
//! recalibration that consumes them.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::softmax;
use crate::model::{AttentionMatrix, RowMeta};

/// Which cached rows the recalibration touches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScope {
    /// Every cached row, prompt and image included.
    #[default]
    All,
    /// Only rows made entirely of generated tokens.
    Generated,
}

/// Softmax-normalized sink weights `W` and the strength `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyVector {
    pub weights: Vec<f64>,
    pub beta: f64,
}

impl PenaltyVector {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weights actually handed to the attention step. Rows outside `scope`
    /// get `w = 1`, which makes the recalibration an identity for them.
    pub fn effective_weights(&self, rows: &[RowMeta], scope: PenaltyScope) -> Vec<f64> {
        match scope {
            PenaltyScope::All => self.weights.clone(),
            PenaltyScope::Generated => self
                .weights
                .iter()
                .zip(rows)
                .map(|(w, r)| if r.generated { *w } else { 1.0 })
                .collect(),
        }
    }
}

/// `w_j = softmax_j(sum_{i >= j} a[i][j])` over a full causal matrix.
pub fn sink_weights(matrix: &AttentionMatrix, beta: f64) -> Result<PenaltyVector> {
    if matrix.is_empty() {
        return Err(Error::EmptyInput("attention matrix"));
    }
    penalty_from_column_mass(&matrix.column_mass(), beta)
}

/// Softmax of already accumulated column masses.
pub fn penalty_from_column_mass(mass: &[f64], beta: f64) -> Result<PenaltyVector> {
    if mass.is_empty() {
        return Err(Error::EmptyInput("column mass"));
    }
    Ok(PenaltyVector {
        weights: softmax(mass),
        beta,
    })
}

/// `(1+beta)s - beta(W⊙s)` on raw (pre-softmax) scores.
pub fn apply_penalty(scores: &[f64], weights: &[f64], beta: f64) -> Result<Vec<f64>> {
    ensure_len("penalty weights", scores.len(), weights.len())?;
    let mut out = scores.to_vec();
    apply_penalty_in_place(&mut out, weights, beta);
    Ok(out)
}

pub(crate) fn apply_penalty_in_place(scores: &mut [f64], weights: &[f64], beta: f64) {
    for (s, w) in scores.iter_mut().zip(weights) {
        *s = (1.0 + beta) * *s - beta * (w * *s);
    }
}
