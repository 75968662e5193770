use serde::{Deserialize, Serialize};

use crate::calibration::penalty_from_column_mass;
use crate::decoding::DecodeConfig;
use crate::error::Result;
use crate::model::{DecoderState, DumpRecord, HeadCache, RowMeta};
use crate::par::*;
use crate::selection::{
    aggregate_discarded, aggregated_scores_weighted, budget_for, saliency_from_image_mass,
    select_top_s,
};

/// What one sparsification event did to one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEvent {
    pub layer: usize,
    pub head: usize,
    pub rows_before: usize,
    pub kept: usize,
    pub pruned: usize,
    pub clusters: usize,
    pub rows_after: usize,
    /// Unaggregated image-token rows among the kept rows.
    pub image_rows_kept: usize,
    /// Unaggregated image-token rows before selection.
    pub image_rows_before: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifyEvent {
    /// Generated tokens so far when the event ran.
    pub step: usize,
    pub heads: Vec<HeadEvent>,
}

impl SparsifyEvent {
    pub fn kept(&self) -> usize {
        self.heads.iter().map(|h| h.kept).sum()
    }

    pub fn pruned(&self) -> usize {
        self.heads.iter().map(|h| h.pruned).sum()
    }

    pub fn clusters(&self) -> usize {
        self.heads.iter().map(|h| h.clusters).sum()
    }

    pub fn image_rows_kept(&self) -> usize {
        self.heads.iter().map(|h| h.image_rows_kept).sum()
    }
}

struct HeadOutcome {
    event: HeadEvent,
    saliency: Vec<f64>,
    penalty: Vec<f64>,
}

/// Runs selection, pruning, aggregation and the penalty refresh on every
/// head of `state`.
pub fn sparsify_event(
    state: &mut DecoderState,
    config: &DecodeConfig,
    step: usize,
) -> Result<SparsifyEvent> {
    let calibration = state.calibration();
    let queries = &state.last_queries;
    let jobs: Vec<(usize, usize, &mut HeadCache)> = state
        .cache
        .layers
        .iter_mut()
        .enumerate()
        .flat_map(|(l, heads)| heads.iter_mut().enumerate().map(move |(h, hc)| (l, h, hc)))
        .collect();
    let outcomes: Vec<Result<HeadOutcome>> = jobs
        .into_par_iter()
        .map(|(l, h, hc)| sparsify_head(hc, &queries[l][h], config, calibration.scope, l, h))
        .collect();

    let mut heads = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let o = o?;
        if state.dump.is_some() {
            let (layer, head) = (o.event.layer, o.event.head);
            state.dump_push(DumpRecord::Saliency {
                layer,
                head,
                step,
                scores: o.saliency,
            });
            state.dump_push(DumpRecord::Penalty {
                layer,
                head,
                step,
                beta: calibration.beta,
                weights: o.penalty,
            });
        }
        heads.push(o.event);
    }
    Ok(SparsifyEvent { step, heads })
}

fn sparsify_head(
    hc: &mut HeadCache,
    query: &[f64],
    config: &DecodeConfig,
    scope: crate::calibration::PenaltyScope,
    layer: usize,
    head: usize,
) -> Result<HeadOutcome> {
    let len = hc.len();
    let dim = hc.head_dim();
    let visual: Vec<f64> = hc.rows().iter().map(|r| r.visual).collect();
    let saliency = saliency_from_image_mass(&visual);
    let sink = if config.weight_delta_by_penalty {
        let mass: Vec<f64> = hc.rows().iter().map(|r| r.received_mass).collect();
        Some(penalty_from_column_mass(&mass, config.beta)?.weights)
    } else {
        None
    };
    let delta =
        aggregated_scores_weighted(query, hc.keys(), &saliency, config.lambda, sink.as_deref())?;
    let budget = budget_for(config.sparsity_fraction, len);
    let mask = select_top_s(&delta, budget)?.for_head(layer, head);

    let is_image_row = |r: &RowMeta| !r.aggregated && r.image_fraction == 1.0;
    let image_rows_before = hc.rows().iter().filter(|r| is_image_row(r)).count();
    let image_rows_kept = mask
        .kept()
        .into_iter()
        .filter(|&i| is_image_row(&hc.rows()[i]))
        .count();

    let pruned = mask.pruned();
    let mut clusters = 0;
    if !pruned.is_empty() {
        let mut keys = Vec::with_capacity(pruned.len() * dim);
        let mut values = Vec::with_capacity(pruned.len() * dim);
        for &i in &pruned {
            keys.extend_from_slice(hc.key(i));
            values.extend_from_slice(hc.value(i));
        }
        let assignment = aggregate_discarded(&keys, &values, dim, &pruned, config.density)?;
        let metas: Vec<RowMeta> = (0..assignment.num_clusters())
            .map(|c| {
                let members: Vec<&RowMeta> = assignment
                    .cluster_members(c)
                    .into_iter()
                    .map(|m| &hc.rows()[assignment.members[m]])
                    .collect();
                merge_meta(
                    &hc.rows()[assignment.members[assignment.peaks[c]]],
                    &members,
                )
            })
            .collect();
        hc.retain(mask.bits());
        for (c, meta) in metas.into_iter().enumerate() {
            hc.push(&assignment.key_sums[c], &assignment.value_sums[c], meta);
        }
        clusters = assignment.num_clusters();
    }

    let mass: Vec<f64> = hc.rows().iter().map(|r| r.received_mass).collect();
    let penalty = penalty_from_column_mass(&mass, config.beta)?;
    hc.set_penalty(penalty.effective_weights(hc.rows(), scope));

    Ok(HeadOutcome {
        event: HeadEvent {
            layer,
            head,
            rows_before: len,
            kept: budget,
            pruned: pruned.len(),
            clusters,
            rows_after: hc.len(),
            image_rows_kept,
            image_rows_before,
        },
        saliency: saliency.0,
        penalty: penalty.weights,
    })
}

fn merge_meta(peak: &RowMeta, members: &[&RowMeta]) -> RowMeta {
    let count: usize = members.iter().map(|m| m.members).sum();
    let weighted = |f: fn(&RowMeta) -> f64| {
        members.iter().map(|m| f(m) * m.members as f64).sum::<f64>() / count as f64
    };
    RowMeta {
        position: peak.position,
        aggregated: true,
        members: count,
        received_mass: members.iter().map(|m| m.received_mass).sum(),
        image_fraction: weighted(|m| m.image_fraction),
        visual: weighted(|m| m.visual),
        generated: members.iter().all(|m| m.generated),
    }
}
