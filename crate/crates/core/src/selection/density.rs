//! k-nearest-neighbour density-peak clustering of pruned cache rows.
//!
//! Local density is the inverse mean distance to the `k` nearest
//! neighbours. Separation is the distance to the nearest denser point (the
//! largest distance for the densest one). Peaks are the points with the
//! largest density x separation, and every other point joins the cluster of
//! its nearest denser neighbour. Each cluster collapses to the element-wise
//! sum of its members' keys and values.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Result};
use crate::linalg::euclidean;

/// Clustering knobs; `None` selects the defaults `min(5, n-1)` and
/// `max(1, ceil(n/4))`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityParams {
    pub k: Option<usize>,
    pub num_peaks: Option<usize>,
}

impl DensityParams {
    pub fn resolve(&self, n: usize) -> (usize, usize) {
        let k = self.k.unwrap_or_else(|| 5.min(n.saturating_sub(1)));
        let peaks = self
            .num_peaks
            .unwrap_or_else(|| 1.max(n.div_ceil(4)))
            .clamp(1, n.max(1));
        (k, peaks)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Caller-supplied identifiers of the clustered rows, in input order.
    pub members: Vec<usize>,
    /// Cluster id for each member.
    pub cluster_of: Vec<usize>,
    /// Member index (into `members`) of each cluster's peak.
    pub peaks: Vec<usize>,
    pub key_sums: Vec<Vec<f64>>,
    pub value_sums: Vec<Vec<f64>>,
    pub k: usize,
    pub num_peaks: usize,
}

impl ClusterAssignment {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.peaks.len()
    }

    /// Member positions (into `members`) of cluster `c`.
    pub fn cluster_members(&self, c: usize) -> Vec<usize> {
        (0..self.cluster_of.len())
            .filter(|&i| self.cluster_of[i] == c)
            .collect()
    }
}

/// Clusters `ids.len()` rows of width `dim` given row-major `keys` and
/// `values`.
pub fn aggregate_discarded(
    keys: &[f64],
    values: &[f64],
    dim: usize,
    ids: &[usize],
    params: DensityParams,
) -> Result<ClusterAssignment> {
    let n = ids.len();
    ensure_len("discarded keys", n * dim, keys.len())?;
    ensure_len("discarded values", n * dim, values.len())?;
    if n == 0 {
        return Ok(ClusterAssignment::default());
    }
    let (k, num_peaks) = params.resolve(n);
    let key = |i: usize| &keys[i * dim..(i + 1) * dim];

    let (cluster_of, peaks) = if n == 1 || k == 0 || k >= n {
        (vec![0; n], vec![0])
    } else {
        let dist: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| euclidean(key(i), key(j))).collect())
            .collect();
        density_peaks(&dist, k, num_peaks)
    };

    let clusters = peaks.len();
    let mut key_sums = vec![vec![0.0; dim]; clusters];
    let mut value_sums = vec![vec![0.0; dim]; clusters];
    for i in 0..n {
        let c = cluster_of[i];
        for d in 0..dim {
            key_sums[c][d] += keys[i * dim + d];
            value_sums[c][d] += values[i * dim + d];
        }
    }
    Ok(ClusterAssignment {
        members: ids.to_vec(),
        cluster_of,
        peaks,
        key_sums,
        value_sums,
        k,
        num_peaks,
    })
}

fn density_peaks(dist: &[Vec<f64>], k: usize, num_peaks: usize) -> (Vec<usize>, Vec<usize>) {
    let n = dist.len();
    let rho: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            d.sort_by(f64::total_cmp);
            let mean = d[..k].iter().sum::<f64>() / k as f64;
            1.0 / (mean + 1e-12)
        })
        .collect();

    // Strict density order: higher rho first, lower index among ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));

    let mut parent = vec![usize::MAX; n];
    let mut delta = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank == 0 {
            delta[i] = dist[i].iter().copied().fold(0.0, f64::max);
            continue;
        }
        let mut best = order[0];
        for &j in &order[..rank] {
            if dist[i][j] < dist[i][best] {
                best = j;
            }
        }
        parent[i] = best;
        delta[i] = dist[i][best];
    }

    // The densest point always leads a cluster. Others need a positive
    // separation, so coincident points never split.
    let mut candidates: Vec<usize> = order[1..]
        .iter()
        .copied()
        .filter(|&i| delta[i] > 0.0)
        .collect();
    candidates.sort_by(|&a, &b| {
        (rho[b] * delta[b])
            .total_cmp(&(rho[a] * delta[a]))
            .then(a.cmp(&b))
    });
    let mut peaks = vec![order[0]];
    peaks.extend(candidates.into_iter().take(num_peaks - 1));

    let mut cluster_of = vec![usize::MAX; n];
    for (c, &p) in peaks.iter().enumerate() {
        cluster_of[p] = c;
    }
    for &i in &order {
        if cluster_of[i] == usize::MAX {
            cluster_of[i] = cluster_of[parent[i]];
        }
    }
    // Peaks listed by cluster id are already in `peaks` order.
    (cluster_of, peaks)
}
