//! Visual-aware top-S token selection.
//!
//! The objective over a binary mask `M` with `sum M = S` is
//! `E(M) = sum_i (y_i - M_i y_i)^2 - lambda P_i M_i` with `y_i = <q, K_i>`.
//! Because `M_i` is binary this equals `sum y_i^2 - sum M_i (y_i^2 + lambda P_i)`,
//! so keeping the `S` largest `delta_i = y_i^2 + lambda P_i` is optimal.
//! [`oracle_optimal_mask`] checks that claim by enumeration.

pub mod density;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{dot, softmax};
use crate::model::AttentionMatrix;

pub use density::{aggregate_discarded, ClusterAssignment, DensityParams};

/// Largest sequence the exhaustive oracle accepts.
pub const MAX_ORACLE_LEN: usize = 20;

/// Binary keep/prune vector with its budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseMask {
    bits: Vec<bool>,
    budget: usize,
    pub layer: Option<usize>,
    pub head: Option<usize>,
}

impl SparseMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let budget = bits.iter().filter(|b| **b).count();
        Self {
            bits,
            budget,
            layer: None,
            head: None,
        }
    }

    /// Mask keeping exactly `kept` (indices into a length-`len` sequence).
    pub fn from_kept(len: usize, kept: &[usize]) -> Self {
        let mut bits = vec![false; len];
        for &i in kept {
            bits[i] = true;
        }
        Self::from_bits(bits)
    }

    pub fn for_head(mut self, layer: usize, head: usize) -> Self {
        self.layer = Some(layer);
        self.head = Some(head);
        self
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn pruned(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }
}

/// Per-token visual saliency, softmax-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyVector(pub Vec<f64>);

impl SaliencyVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Which last-layer heads feed the per-token image-attention statistic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    /// The last head of the last layer.
    #[default]
    LastHead,
    /// Mean over all heads of the last layer.
    LastLayerMean,
}

impl SaliencySource {
    pub fn pick(self, per_head: &[f64]) -> f64 {
        match self {
            SaliencySource::LastHead => per_head.last().copied().unwrap_or(0.0),
            SaliencySource::LastLayerMean => {
                per_head.iter().sum::<f64>() / per_head.len().max(1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub error: f64,
    pub attention_term: f64,
    pub saliency_term: f64,
    pub lambda: f64,
}

/// `P_i = softmax_i(sum_{k in image_set} a[i][k])` over a full causal matrix.
pub fn saliency_scores(matrix: &AttentionMatrix, image_set: &[usize]) -> Result<SaliencyVector> {
    if image_set.is_empty() {
        return Err(Error::Degenerate("saliency needs at least one image token"));
    }
    if matrix.is_empty() {
        return Err(Error::EmptyInput("attention matrix"));
    }
    if image_set.iter().any(|&k| k >= matrix.len()) {
        return Err(Error::Precondition(
            "image position outside the attention matrix",
        ));
    }
    let image_mass: Vec<f64> = (0..matrix.len())
        .map(|i| image_set.iter().map(|&k| matrix.get(i, k)).sum())
        .collect();
    Ok(saliency_from_image_mass(&image_mass))
}

/// Softmax of per-token image-attention sums.
pub fn saliency_from_image_mass(image_mass: &[f64]) -> SaliencyVector {
    SaliencyVector(softmax(image_mass))
}

fn key_rows(query: &[f64], keys: &[f64]) -> Result<usize> {
    if query.is_empty() {
        return Err(Error::EmptyInput("query"));
    }
    if !keys.len().is_multiple_of(query.len()) {
        return Err(Error::Shape {
            what: "key matrix width",
            expected: query.len(),
            actual: keys.len() % query.len(),
        });
    }
    Ok(keys.len() / query.len())
}

/// `y_i = <q, K_i>` for row-major `keys` of width `q.len()`.
pub fn inner_products(query: &[f64], keys: &[f64]) -> Result<Vec<f64>> {
    key_rows(query, keys)?;
    Ok(keys
        .chunks_exact(query.len())
        .map(|k| dot(query, k))
        .collect())
}

/// `delta_i = <q, K_i>^2 + lambda P_i`.
pub fn aggregated_scores(
    query: &[f64],
    keys: &[f64],
    saliency: &SaliencyVector,
    lambda: f64,
) -> Result<Vec<f64>> {
    aggregated_scores_weighted(query, keys, saliency, lambda, None)
}

/// As [`aggregated_scores`], optionally scaling the attention term by a
/// per-token weight: `delta_i = w_i <q, K_i>^2 + lambda P_i`.
pub fn aggregated_scores_weighted(
    query: &[f64],
    keys: &[f64],
    saliency: &SaliencyVector,
    lambda: f64,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if lambda < 0.0 {
        return Err(Error::Precondition("lambda must be non-negative"));
    }
    let y = inner_products(query, keys)?;
    ensure_len("saliency vector", y.len(), saliency.len())?;
    if let Some(w) = weights {
        ensure_len("delta weights", y.len(), w.len())?;
    }
    Ok(y.iter()
        .enumerate()
        .map(|(i, yi)| {
            let w = weights.map_or(1.0, |w| w[i]);
            w * yi * yi + lambda * saliency.0[i]
        })
        .collect())
}

/// Ranks by `delta` descending, lower index first among ties.
pub fn ranking(delta: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..delta.len()).collect();
    order.sort_by(|&a, &b| delta[b].total_cmp(&delta[a]).then(a.cmp(&b)));
    order
}

/// Keeps the `budget` largest scores.
pub fn select_top_s(delta: &[f64], budget: usize) -> Result<SparseMask> {
    if budget > delta.len() {
        return Err(Error::Budget {
            budget,
            len: delta.len(),
        });
    }
    let order = ranking(delta);
    Ok(SparseMask::from_kept(delta.len(), &order[..budget]))
}

/// Evaluates the unified objective term by term in index order.
pub fn objective(
    query: &[f64],
    keys: &[f64],
    mask: &SparseMask,
    saliency: &SaliencyVector,
    lambda: f64,
) -> Result<ObjectiveValue> {
    let y = inner_products(query, keys)?;
    ensure_len("mask", y.len(), mask.len())?;
    ensure_len("saliency vector", y.len(), saliency.len())?;
    Ok(objective_from_products(
        &y,
        mask.bits(),
        &saliency.0,
        lambda,
    ))
}

fn objective_from_products(y: &[f64], bits: &[bool], p: &[f64], lambda: f64) -> ObjectiveValue {
    let mut attention_term = 0.0;
    let mut saliency_term = 0.0;
    for i in 0..y.len() {
        let m = if bits[i] { 1.0 } else { 0.0 };
        let r = y[i] - m * y[i];
        attention_term += r * r;
        saliency_term += p[i] * m;
    }
    ObjectiveValue {
        error: attention_term - lambda * saliency_term,
        attention_term,
        saliency_term,
        lambda,
    }
}

/// Exhaustive argmin of the objective over every mask with `budget` ones.
///
/// Index sets are visited in lexicographic order and only a strictly
/// smaller error replaces the incumbent, so among equal errors the set with
/// the lowest indices wins, matching [`select_top_s`].
pub fn oracle_optimal_mask(
    query: &[f64],
    keys: &[f64],
    saliency: &SaliencyVector,
    lambda: f64,
    budget: usize,
) -> Result<(SparseMask, ObjectiveValue)> {
    let y = inner_products(query, keys)?;
    let len = y.len();
    if len > MAX_ORACLE_LEN {
        return Err(Error::Tractability {
            len,
            max: MAX_ORACLE_LEN,
        });
    }
    if budget > len {
        return Err(Error::Budget { budget, len });
    }
    ensure_len("saliency vector", len, saliency.len())?;

    let mut combo: Vec<usize> = (0..budget).collect();
    let mut bits = vec![false; len];
    let mut best: Option<(Vec<bool>, ObjectiveValue)> = None;
    loop {
        bits.iter_mut().for_each(|b| *b = false);
        for &i in &combo {
            bits[i] = true;
        }
        let value = objective_from_products(&y, &bits, &saliency.0, lambda);
        if best.as_ref().is_none_or(|(_, b)| value.error < b.error) {
            best = Some((bits.clone(), value));
        }
        if !next_combination(&mut combo, len) {
            break;
        }
    }
    let (bits, value) = best.expect("at least one feasible mask");
    Ok((SparseMask::from_bits(bits), value))
}

/// Advances `combo` to the next `k`-subset of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Default budget `ceil(fraction * len)`, clamped to `len`.
pub fn budget_for(fraction: f64, len: usize) -> usize {
    ((fraction * len as f64).ceil() as usize).min(len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        q: Vec<f64>,
        keys: Vec<f64>,
        p: SaliencyVector,
    }

    fn instance(seed: u64, len: usize, dim: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let keys = (0..len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        Instance {
            q,
            keys,
            p: saliency_from_image_mass(&raw),
        }
    }

    #[test]
    fn delta_direct_arithmetic() {
        let p = SaliencyVector(vec![0.2, 0.3, 0.5]);
        let d = aggregated_scores(&[1.0, 0.0], &[2.0, 0.0, 1.0, 0.0, 0.0, 1.0], &p, 0.0).unwrap();
        assert_eq!(d, vec![4.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_query_ranks_by_saliency() {
        let p = SaliencyVector(vec![0.2, 0.3, 0.5]);
        let d = aggregated_scores(&[0.0, 0.0], &[2.0, 0.0, 1.0, 0.0, 0.0, 1.0], &p, 0.1).unwrap();
        for (a, b) in d.iter().zip(&p.0) {
            assert_eq!(*a, 0.1 * b);
        }
    }

    #[test]
    fn delta_matches_hand_evaluation() {
        let inst = instance(11, 8, 3);
        let d = aggregated_scores(&inst.q, &inst.keys, &inst.p, 0.1).unwrap();
        for (i, di) in d.iter().enumerate() {
            let k = &inst.keys[i * 3..i * 3 + 3];
            let y = inst.q[0] * k[0] + inst.q[1] * k[1] + inst.q[2] * k[2];
            assert!((di - (y * y + 0.1 * inst.p.0[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn delta_shape_errors() {
        let p = SaliencyVector(vec![0.5, 0.5]);
        assert!(aggregated_scores(&[1.0, 0.0], &[1.0, 0.0, 1.0], &p, 0.1).is_err());
        assert!(aggregated_scores(&[1.0], &[1.0, 2.0, 3.0], &p, 0.1).is_err());
        assert!(aggregated_scores(&[1.0], &[1.0, 2.0], &p, -0.1).is_err());
    }

    #[test]
    fn weighted_delta_hook() {
        let p = SaliencyVector(vec![0.5, 0.5]);
        let d =
            aggregated_scores_weighted(&[1.0], &[2.0, 3.0], &p, 0.0, Some(&[0.5, 2.0])).unwrap();
        assert_eq!(d, vec![2.0, 18.0]);
    }

    #[test]
    fn top_s_basic_cases() {
        assert_eq!(
            select_top_s(&[4.0, 1.0, 0.0], 2).unwrap().bits(),
            &[true, true, false]
        );
        assert_eq!(
            select_top_s(&[1.0; 4], 2).unwrap().bits(),
            &[true, true, false, false]
        );
        assert!(matches!(select_top_s(&[1.0], 2), Err(Error::Budget { .. })));
        let all = select_top_s(&[0.3, 0.1, 0.2], 3).unwrap();
        assert_eq!(all.budget(), 3);
    }

    #[test]
    fn full_budget_objective_is_negative_total_saliency() {
        let inst = instance(3, 6, 4);
        let m = SparseMask::from_bits(vec![true; 6]);
        let v = objective(&inst.q, &inst.keys, &m, &inst.p, 0.1).unwrap();
        assert_eq!(v.attention_term, 0.0);
        let total: f64 = inst.p.0.iter().sum();
        assert!((v.error + 0.1 * total).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_objective_is_sum_of_squares() {
        let inst = instance(4, 5, 3);
        let m = SparseMask::from_bits(vec![false; 5]);
        let v = objective(&inst.q, &inst.keys, &m, &inst.p, 0.1).unwrap();
        let y = inner_products(&inst.q, &inst.keys).unwrap();
        let ss: f64 = y.iter().map(|v| v * v).sum();
        assert!((v.error - ss).abs() < 1e-12);
        assert_eq!(v.saliency_term, 0.0);
    }

    #[test]
    fn objective_matches_scalar_recomputation() {
        let inst = instance(5, 5, 2);
        let m = SparseMask::from_bits(vec![true, false, true, false, false]);
        let v = objective(&inst.q, &inst.keys, &m, &inst.p, 0.1).unwrap();
        let mut expect = 0.0;
        for i in 0..5 {
            let y = inst.q[0] * inst.keys[2 * i] + inst.q[1] * inst.keys[2 * i + 1];
            let mi = if m.bits()[i] { 1.0 } else { 0.0 };
            expect += (y - mi * y).powi(2) - 0.1 * inst.p.0[i] * mi;
        }
        assert!((v.error - expect).abs() < 1e-12);
        assert!((v.error - (v.attention_term - v.lambda * v.saliency_term)).abs() < 1e-9);
    }

    #[test]
    fn oracle_guards() {
        let inst = instance(6, 21, 1);
        assert!(matches!(
            oracle_optimal_mask(&inst.q, &inst.keys, &inst.p, 0.1, 3),
            Err(Error::Tractability { len: 21, .. })
        ));
        let inst = instance(6, 4, 1);
        assert!(oracle_optimal_mask(&inst.q, &inst.keys, &inst.p, 0.1, 5).is_err());
        let (m, _) = oracle_optimal_mask(&inst.q, &inst.keys, &inst.p, 0.1, 4).unwrap();
        assert_eq!(m.bits(), &[true; 4]);
    }

    #[test]
    fn oracle_tie_rule_matches_greedy() {
        let p = SaliencyVector(vec![0.25; 4]);
        let (m, _) = oracle_optimal_mask(&[1.0], &[1.0; 4], &p, 0.1, 2).unwrap();
        assert_eq!(m.bits(), &[true, true, false, false]);
    }

    #[test]
    fn combinations_are_lexicographic_and_complete() {
        let mut c = vec![0, 1];
        let mut seen = vec![c.clone()];
        while next_combination(&mut c, 4) {
            seen.push(c.clone());
        }
        assert_eq!(
            seen,
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
        let mut empty: Vec<usize> = vec![];
        assert!(!next_combination(&mut empty, 3));
    }

    #[test]
    fn saliency_cases() {
        let m = AttentionMatrix::from_rows(vec![vec![1.0], vec![1.0, 0.0]]).unwrap();
        let p = saliency_scores(&m, &[0]).unwrap();
        assert_eq!(p.0, vec![0.5, 0.5]);
        assert!(matches!(
            saliency_scores(&m, &[]),
            Err(Error::Degenerate(_))
        ));

        let p = saliency_from_image_mass(&[0.0, 10.0, 0.0]);
        assert!(p.0[1] > 0.99);
    }

    #[test]
    fn saliency_matches_scalar_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                softmax(
                    &(0..=i)
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let m = AttentionMatrix::from_rows(rows.clone()).unwrap();
        let image = [0usize, 1];
        let p = saliency_scores(&m, &image).unwrap();
        let sums: Vec<f64> = rows
            .iter()
            .map(|r| r[0] + if r.len() > 1 { r[1] } else { 0.0 })
            .collect();
        let z: f64 = sums.iter().map(|s| s.exp()).sum();
        for (got, s) in p.0.iter().zip(&sums) {
            assert!((got - s.exp() / z).abs() < 1e-14);
        }
    }

    #[test]
    fn strict_ordering_gives_identical_sets() {
        for seed in 0..50 {
            let inst = instance(100 + seed, 9, 3);
            let d = aggregated_scores(&inst.q, &inst.keys, &inst.p, 0.1).unwrap();
            for s in 0..=9 {
                let g = select_top_s(&d, s).unwrap();
                let (o, _) = oracle_optimal_mask(&inst.q, &inst.keys, &inst.p, 0.1, s).unwrap();
                assert_eq!(g, o);
            }
        }
    }

    proptest! {
        #[test]
        fn greedy_matches_oracle_objective(
            seed in any::<u64>(),
            len in 1usize..=12,
            s_frac in 0.0f64..=1.0,
            lambda in prop::sample::select(vec![0.0, 0.1, 1.0]),
        ) {
            let inst = instance(seed, len, 3);
            let s = ((s_frac * len as f64).round() as usize).min(len);
            let d = aggregated_scores(&inst.q, &inst.keys, &inst.p, lambda).unwrap();
            let g = select_top_s(&d, s).unwrap();
            let gv = objective(&inst.q, &inst.keys, &g, &inst.p, lambda).unwrap();
            let (_, ov) = oracle_optimal_mask(&inst.q, &inst.keys, &inst.p, lambda, s).unwrap();
            prop_assert_eq!(gv.error, ov.error);
        }

        #[test]
        fn swapping_never_improves(seed in any::<u64>(), len in 2usize..=12, s in 1usize..12) {
            let s = s.min(len - 1);
            let inst = instance(seed, len, 3);
            let d = aggregated_scores(&inst.q, &inst.keys, &inst.p, 0.1).unwrap();
            let g = select_top_s(&d, s).unwrap();
            let base = objective(&inst.q, &inst.keys, &g, &inst.p, 0.1).unwrap().error;
            for k in g.kept() {
                for p in g.pruned() {
                    let mut bits = g.bits().to_vec();
                    bits.swap(k, p);
                    let v = objective(&inst.q, &inst.keys, &SparseMask::from_bits(bits), &inst.p, 0.1)
                        .unwrap()
                        .error;
                    prop_assert!(v >= base);
                }
            }
        }

        #[test]
        fn raising_saliency_keeps_token(
            seed in any::<u64>(),
            len in 2usize..=12,
            s in 1usize..12,
            target in 0usize..12,
            bump in 0.0f64..5.0,
        ) {
            let s = s.min(len);
            let target = target % len;
            let inst = instance(seed, len, 3);
            let d = aggregated_scores(&inst.q, &inst.keys, &inst.p, 0.1).unwrap();
            let before = select_top_s(&d, s).unwrap();
            let mut raw = inst.p.0.clone();
            raw[target] += bump;
            let d2 = aggregated_scores(&inst.q, &inst.keys, &SaliencyVector(raw), 0.1).unwrap();
            let after = select_top_s(&d2, s).unwrap();
            if before.bits()[target] {
                prop_assert!(after.bits()[target]);
            }
        }
    }
}
