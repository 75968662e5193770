//! Per-layer, per-head key/value storage with row provenance.

use serde::{Deserialize, Serialize};

/// Bookkeeping carried alongside each cached key/value row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    /// Original sequence index. For an aggregated row this is the position
    /// of the cluster's peak member.
    pub position: usize,
    pub aggregated: bool,
    /// Number of original tokens folded into this row.
    pub members: usize,
    /// Cumulative attention this row has received from every query so far.
    pub received_mass: f64,
    /// Fraction of member tokens that are image tokens.
    pub image_fraction: f64,
    /// Attention mass the row's own query placed on image rows, taken from
    /// the saliency source head. Mean over members for aggregated rows.
    pub visual: f64,
    /// Whether every member is a generated token.
    pub generated: bool,
}

/// One head's slice of the cache. Keys and values are row-major with
/// `head_dim` columns.
#[derive(Debug, Clone, Default)]
pub struct HeadCache {
    head_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    rows: Vec<RowMeta>,
    /// Effective sink weights fed to the attention recalibration, aligned
    /// with `rows`. `None` until the first refresh.
    pub(crate) penalty: Option<Vec<f64>>,
}

impl HeadCache {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            ..Default::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn key(&self, row: usize) -> &[f64] {
        &self.keys[row * self.head_dim..(row + 1) * self.head_dim]
    }

    pub fn value(&self, row: usize) -> &[f64] {
        &self.values[row * self.head_dim..(row + 1) * self.head_dim]
    }

    pub fn rows(&self) -> &[RowMeta] {
        &self.rows
    }

    pub(crate) fn rows_mut(&mut self) -> &mut [RowMeta] {
        &mut self.rows
    }

    pub fn penalty_weights(&self) -> Option<&[f64]> {
        self.penalty.as_deref()
    }

    pub fn push(&mut self, key: &[f64], value: &[f64], meta: RowMeta) {
        debug_assert_eq!(key.len(), self.head_dim);
        debug_assert_eq!(value.len(), self.head_dim);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.rows.push(meta);
        if let Some(w) = self.penalty.as_mut() {
            // No accumulated evidence yet for a fresh row.
            w.push(0.0);
        }
    }

    /// Keeps the rows flagged in `keep` (in their current order) and drops
    /// the rest. Invalidates any penalty vector.
    pub(crate) fn retain(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.rows.len());
        let d = self.head_dim;
        let mut w = 0;
        for (r, &kept) in keep.iter().enumerate() {
            if kept {
                if w != r {
                    self.keys.copy_within(r * d..(r + 1) * d, w * d);
                    self.values.copy_within(r * d..(r + 1) * d, w * d);
                    self.rows.swap(w, r);
                }
                w += 1;
            }
        }
        self.keys.truncate(w * d);
        self.values.truncate(w * d);
        self.rows.truncate(w);
        self.penalty = None;
    }

    pub(crate) fn set_penalty(&mut self, weights: Vec<f64>) {
        debug_assert_eq!(weights.len(), self.rows.len());
        self.penalty = Some(weights);
    }
}

/// The full cache: `layers[layer][head]`.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub(crate) layers: Vec<Vec<HeadCache>>,
}

impl KvCache {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            layers: (0..num_layers)
                .map(|_| (0..num_heads).map(|_| HeadCache::new(head_dim)).collect())
                .collect(),
        }
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadCache {
        &self.layers[layer][head]
    }

    pub fn layers(&self) -> &[Vec<HeadCache>] {
        &self.layers
    }

    /// Live rows summed over every layer and head.
    pub fn total_rows(&self) -> usize {
        self.layers.iter().flatten().map(HeadCache::len).sum()
    }
}
