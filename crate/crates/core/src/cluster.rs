//! Heuristic hierarchical clustering.
//!
//! Clusters merge in rounds. Each round every active cluster finds the
//! neighbor minimizing `D = size(a)·size(b)·(1 − cos(a, b))²`; a proposal is
//! legal only when the proposer is not larger than its neighbor (equal sizes:
//! the lower id becomes the source). Legal proposals are applied in ascending
//! `D` order, each cluster taking part in at most one merge per round, until
//! the target cluster count is reached or a round makes no merge.
//!
//! Because a source always joins a cluster at least its own size, an item's
//! cluster doubles every time it is the merging side, which bounds the depth
//! of the merge tree by `⌈log₂ n⌉`.

use std::time::Instant;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, dot, softmax_into};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    /// Item indices, ascending.
    pub members: Vec<usize>,
    /// Unit-norm direction of the member mean.
    pub centroid: Vec<f64>,
    /// Sum of the unit-normalized member embeddings.
    pub member_sum: Vec<f64>,
    pub pseudo_label: Option<usize>,
    /// Mean softmax probability of the pseudo-label over members.
    pub confidence: Option<f64>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeParams {
    /// Merging stops once this many clusters remain.
    pub stop_cluster_count: usize,
    pub max_rounds: usize,
    /// Candidates examined per cluster and hash table in approximate rounds.
    pub neighbor_k: usize,
    /// Active-cluster count at or below which neighbor search is exact.
    pub exact_threshold: usize,
    pub hash_tables: usize,
    pub seed: u64,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self {
            stop_cluster_count: 10,
            max_rounds: 10_000,
            neighbor_k: 16,
            exact_threshold: 2048,
            hash_tables: 4,
            seed: 0,
        }
    }
}

impl MergeParams {
    /// Default multiplier: ten clusters per class.
    pub const CLUSTERS_PER_CLASS: usize = 10;

    pub fn for_classes(num_classes: usize) -> Self {
        Self {
            stop_cluster_count: Self::CLUSTERS_PER_CLASS * num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.stop_cluster_count < num_classes.max(1) {
            return Err(Error::Config(format!(
                "stop_cluster_count ({}) must be >= the class count ({num_classes})",
                self.stop_cluster_count
            )));
        }
        if self.neighbor_k == 0 || self.hash_tables == 0 {
            return Err(Error::Config("neighbor_k and hash_tables must be positive".into()));
        }
        Ok(())
    }
}

/// One executed merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub round: usize,
    pub source: usize,
    pub target: usize,
    pub distance: f64,
    pub source_size: usize,
    pub target_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Final clusters ordered by id.
    pub clusters: Vec<Cluster>,
    pub merges: Vec<MergeRecord>,
    pub rounds: usize,
    /// Rounds whose neighbor search used the approximate index.
    pub approximate_rounds: usize,
}

impl Clustering {
    /// Cluster position for every item.
    pub fn assignment(&self, n: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n];
        for (pos, c) in self.clusters.iter().enumerate() {
            for &m in &c.members {
                out[m] = pos;
            }
        }
        out
    }

    /// The partition as sorted member lists, sorted by first member.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut p: Vec<Vec<usize>> = self.clusters.iter().map(|c| c.members.clone()).collect();
        p.sort();
        p
    }
}

/// Size-weighted squared cosine distance between unit centroids.
#[inline]
pub fn metric(size_a: usize, size_b: usize, centroid_a: &[f64], centroid_b: &[f64]) -> f64 {
    let dist = 1.0 - dot(centroid_a, centroid_b);
    (size_a * size_b) as f64 * dist * dist
}

/// [`metric`] applied to two clusters.
pub fn merge_metric(a: &Cluster, b: &Cluster) -> f64 {
    metric(a.size(), b.size(), &a.centroid, &b.centroid)
}

/// Orients a proposal from `from` toward its nearest neighbor `to`:
/// `Some((source, target))` when legal.
#[inline]
pub(crate) fn orient(from: usize, from_size: usize, to: usize, to_size: usize) -> Option<(usize, usize)> {
    use std::cmp::Ordering::*;
    match from_size.cmp(&to_size) {
        Less => Some((from, to)),
        Equal => Some((from.min(to), from.max(to))),
        Greater => None,
    }
}

/// Unit-normalizes every row; zero rows are rejected.
pub(crate) fn unit_rows(embeddings: ArrayView2<f64>) -> Result<Vec<f64>> {
    let d = embeddings.ncols();
    let mut out = Vec::with_capacity(embeddings.len());
    for row in embeddings.outer_iter() {
        // Plain left-to-right sum: centroids must be bit-stable across code paths.
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("embedding"));
        }
        if norm == 0.0 {
            return Err(Error::DegenerateVector);
        }
        out.extend(row.iter().map(|x| x / norm));
    }
    debug_assert_eq!(out.len(), embeddings.nrows() * d);
    Ok(out)
}

struct State {
    dim: usize,
    units: Vec<f64>,
    /// Sorted member lists; empty once merged away.
    members: Vec<Vec<usize>>,
    sums: Vec<f64>,
    centroids: Vec<f64>,
    /// Active cluster ids, ascending.
    active: Vec<usize>,
}

impl State {
    fn centroid(&self, id: usize) -> &[f64] {
        &self.centroids[id * self.dim..(id + 1) * self.dim]
    }

    fn size(&self, id: usize) -> usize {
        self.members[id].len()
    }

    fn merge(&mut self, source: usize, target: usize) {
        let moved = std::mem::take(&mut self.members[source]);
        let kept = std::mem::take(&mut self.members[target]);
        self.members[target] = merge_sorted(&kept, &moved);
        self.refresh(target);
    }

    /// Recomputes sum and centroid of `id` from its unit members in
    /// ascending order, so the result depends only on the member set.
    fn refresh(&mut self, id: usize) {
        let d = self.dim;
        let t = id * d;
        let sum = &mut self.sums[t..t + d];
        sum.iter_mut().for_each(|x| *x = 0.0);
        for &m in &self.members[id] {
            for (s, u) in sum.iter_mut().zip(&self.units[m * d..(m + 1) * d]) {
                *s += u;
            }
        }
        let norm = dot(sum, sum).sqrt();
        // A zero sum (exactly opposite members) keeps the previous direction.
        if norm > 0.0 {
            for j in 0..d {
                self.centroids[t + j] = self.sums[t + j] / norm;
            }
        }
    }

    /// Best neighbor among `candidates`: smallest D, ties to the lowest id.
    fn best_of(&self, id: usize, candidates: impl Iterator<Item = usize>) -> Option<(f64, usize)> {
        let (ci, si) = (self.centroid(id), self.size(id));
        let mut best: Option<(f64, usize)> = None;
        for j in candidates {
            if j == id {
                continue;
            }
            let dm = metric(si, self.size(j), ci, self.centroid(j));
            best = match best {
                Some((bd, bj)) if bd < dm || (bd == dm && bj < j) => Some((bd, bj)),
                _ => Some((dm, j)),
            };
        }
        best
    }

    fn exact_neighbors(&self) -> Vec<Option<(f64, usize)>> {
        self.active
            .par_iter()
            .map(|&i| self.best_of(i, self.active.iter().copied()))
            .collect()
    }

    /// Candidate neighbors from random-hyperplane codes: in each table the
    /// active clusters are ordered by (code, projection) and every cluster
    /// examines the `k` clusters around it in that order.
    fn approximate_neighbors(&self, params: &MergeParams, rng: &mut Rng) -> Vec<Option<(f64, usize)>> {
        let m = self.active.len();
        let bits = ((m as f64 / params.neighbor_k as f64).log2().floor() as usize).clamp(1, 16);
        let mut candidates: Vec<Vec<usize>> = vec![Vec::new(); m];
        let half = params.neighbor_k.div_ceil(2);
        for _ in 0..params.hash_tables {
            let planes: Vec<Vec<f64>> = (0..=bits).map(|_| (0..self.dim).map(|_| rng.normal()).collect()).collect();
            let mut keyed: Vec<(u32, f64, usize)> = self
                .active
                .par_iter()
                .enumerate()
                .map(|(pos, &id)| {
                    let c = self.centroid(id);
                    let code = planes[1..]
                        .iter()
                        .enumerate()
                        .fold(0u32, |acc, (b, p)| acc | (u32::from(dot(c, p) >= 0.0) << b));
                    (code, dot(c, &planes[0]), pos)
                })
                .collect();
            keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
            for (rank, &(_, _, pos)) in keyed.iter().enumerate() {
                let lo = rank.saturating_sub(half);
                let hi = (rank + half + 1).min(m);
                candidates[pos].extend(keyed[lo..hi].iter().map(|k| self.active[k.2]));
            }
        }
        self.active
            .par_iter()
            .zip(candidates.par_iter_mut())
            .map(|(&i, cands)| {
                cands.sort_unstable();
                cands.dedup();
                self.best_of(i, cands.iter().copied())
            })
            .collect()
    }
}

/// Clusters `embeddings` (one item per row). Rows are unit-normalized first,
/// so only directions matter.
pub fn cluster(embeddings: ArrayView2<f64>, params: &MergeParams) -> Result<Clustering> {
    let (n, d) = embeddings.dim();
    if n == 0 {
        return Err(Error::Empty("embeddings"));
    }
    if params.neighbor_k == 0 || params.hash_tables == 0 {
        return Err(Error::Config("neighbor_k and hash_tables must be positive".into()));
    }
    let units = unit_rows(embeddings)?;
    let mut state = State {
        dim: d,
        sums: vec![0.0; units.len()],
        centroids: units.clone(),
        units,
        members: (0..n).map(|i| vec![i]).collect(),
        active: (0..n).collect(),
    };
    for i in 0..n {
        state.refresh(i);
    }
    let stop = params.stop_cluster_count.max(1);
    let root = Rng::new(params.seed);
    let mut merges = Vec::new();
    let mut rounds = 0;
    let mut approximate_rounds = 0;
    let mut consumed = vec![false; n];

    while state.active.len() > stop && rounds < params.max_rounds {
        let approximate = state.active.len() > params.exact_threshold;
        let mut neighbors = if approximate {
            approximate_rounds += 1;
            state.approximate_neighbors(params, &mut root.split(rounds as u64))
        } else {
            state.exact_neighbors()
        };
        let mut proposals = collect_proposals(&state, &neighbors);
        if proposals.is_empty() && approximate {
            // The index missed every legal pair; fall back to an exact scan.
            approximate_rounds -= 1;
            neighbors = state.exact_neighbors();
            proposals = collect_proposals(&state, &neighbors);
        }
        let mut merged = 0;
        let mut remaining = state.active.len();
        for (dm, source, target) in proposals {
            if remaining <= stop {
                break;
            }
            if consumed[source] || consumed[target] {
                continue;
            }
            consumed[source] = true;
            consumed[target] = true;
            merges.push(MergeRecord {
                round: rounds,
                source,
                target,
                distance: dm,
                source_size: state.size(source),
                target_size: state.size(target),
            });
            state.merge(source, target);
            merged += 1;
            remaining -= 1;
        }
        rounds += 1;
        if merged == 0 {
            break;
        }
        for &id in &state.active {
            consumed[id] = false;
        }
        let members = &state.members;
        state.active.retain(|&id| !members[id].is_empty());
    }

    let clusters = state
        .active
        .iter()
        .map(|&id| {
            Cluster {
                id,
                members: state.members[id].clone(),
                centroid: state.centroid(id).to_vec(),
                member_sum: state.sums[id * d..(id + 1) * d].to_vec(),
                pseudo_label: None,
                confidence: None,
            }
        })
        .collect();
    Ok(Clustering {
        clusters,
        merges,
        rounds,
        approximate_rounds,
    })
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] < b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Legal proposals sorted by `(D, source, target)`, duplicates removed.
fn collect_proposals(state: &State, neighbors: &[Option<(f64, usize)>]) -> Vec<(f64, usize, usize)> {
    let mut proposals: Vec<(f64, usize, usize)> = state
        .active
        .iter()
        .zip(neighbors)
        .filter_map(|(&i, nb)| {
            let (dm, j) = (*nb)?;
            orient(i, state.size(i), j, state.size(j)).map(|(s, t)| (dm, s, t))
        })
        .collect();
    proposals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    proposals.dedup_by(|a, b| a.1 == b.1 && a.2 == b.2);
    proposals
}

/// Sets each cluster's pseudo-label to the argmax of the mean member softmax
/// (ties to the lowest class index) and records that mean probability.
pub fn assign_pseudo_labels(clusters: &mut [Cluster], logits: ArrayView2<f64>) -> Result<()> {
    let c = logits.ncols();
    let mut probs = vec![0.0; c];
    let mut mean = vec![0.0; c];
    for cl in clusters.iter_mut() {
        mean.iter_mut().for_each(|x| *x = 0.0);
        for &m in &cl.members {
            if m >= logits.nrows() {
                return Err(Error::dims("pseudo-label logits rows", m + 1, logits.nrows()));
            }
            let row = logits.row(m);
            let row = row.as_slice().ok_or(Error::Config("logits must be contiguous".into()))?;
            softmax_into(row, &mut probs);
            mean.iter_mut().zip(&probs).for_each(|(a, p)| *a += p);
        }
        let inv = 1.0 / cl.size() as f64;
        mean.iter_mut().for_each(|x| *x *= inv);
        let label = argmax(&mean);
        cl.pseudo_label = Some(label);
        cl.confidence = Some(mean[label]);
    }
    Ok(())
}

/// Wall-clock seconds of one [`cluster`] call.
pub fn time_cluster(embeddings: ArrayView2<f64>, params: &MergeParams) -> Result<(Clustering, f64)> {
    let start = Instant::now();
    let c = cluster(embeddings, params)?;
    Ok((c, start.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_force_cluster;
    use ndarray::{array, Array2};

    fn unit_cluster(id: usize, size: usize, centroid: Vec<f64>) -> Cluster {
        Cluster {
            id,
            members: (0..size).collect(),
            member_sum: centroid.iter().map(|x| x * size as f64).collect(),
            centroid,
            pseudo_label: None,
            confidence: None,
        }
    }

    #[test]
    fn metric_examples() {
        let a = unit_cluster(0, 4, vec![1.0, 0.0]);
        let b = unit_cluster(1, 7, vec![1.0, 0.0]);
        assert_eq!(merge_metric(&a, &b), 0.0);

        // cosine distance 0.5: angle 60 degrees
        let c = unit_cluster(0, 2, vec![1.0, 0.0]);
        let d = unit_cluster(1, 3, vec![0.5, 3f64.sqrt() / 2.0]);
        assert!((merge_metric(&c, &d) - 1.5).abs() < 1e-12);
        let d2 = unit_cluster(1, 6, d.centroid.clone());
        assert!((merge_metric(&c, &d2) - 2.0 * merge_metric(&c, &d)).abs() < 1e-12);
    }

    #[test]
    fn orientation_rule() {
        assert_eq!(orient(5, 1, 2, 3), Some((5, 2)));
        assert_eq!(orient(5, 2, 2, 2), Some((2, 5)));
        assert_eq!(orient(1, 2, 7, 2), Some((1, 7)));
        assert_eq!(orient(5, 4, 2, 3), None);
    }

    #[test]
    fn single_item() {
        let c = cluster(array![[0.3, 0.4]].view(), &MergeParams::default()).unwrap();
        assert_eq!(c.partition(), vec![vec![0]]);
        assert!(c.merges.is_empty());
        assert!((c.clusters[0].centroid[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn two_separated_pairs() {
        let e = array![[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [0.0, 3.0]];
        let params = MergeParams {
            stop_cluster_count: 2,
            ..Default::default()
        };
        let c = cluster(e.view(), &params).unwrap();
        assert_eq!(c.partition(), vec![vec![0, 2], vec![1, 3]]);
        assert!(c.merges.iter().all(|m| m.distance == 0.0));
    }

    #[test]
    fn rejects_zero_rows() {
        assert!(matches!(
            cluster(array![[0.0, 0.0], [1.0, 0.0]].view(), &MergeParams::default()),
            Err(Error::DegenerateVector)
        ));
    }

    fn directions_instance(seed: u64, n: usize, dirs: usize, noise: f64) -> Array2<f64> {
        let mut rng = Rng::new(seed);
        let centers: Vec<Vec<f64>> = (0..dirs).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        Array2::from_shape_fn((n, 8), |(i, j)| centers[i % dirs][j] + noise * rng.normal())
    }

    #[test]
    fn three_directions_match_brute_force() {
        let e = directions_instance(3, 60, 3, 0.05);
        let params = MergeParams {
            stop_cluster_count: 3,
            ..Default::default()
        };
        let fast = cluster(e.view(), &params).unwrap();
        let slow = brute_force_cluster(e.view(), params.stop_cluster_count, params.max_rounds);
        assert_eq!(fast.partition(), slow);
        let mut expect: Vec<Vec<usize>> = (0..3).map(|r| (r..60).step_by(3).collect()).collect();
        expect.sort();
        assert_eq!(fast.partition(), expect);
    }

    #[test]
    fn merge_log_respects_size_rule_and_depth_bound() {
        for seed in 0..5 {
            let n = 300;
            let e = directions_instance(seed, n, 7, 0.3);
            let params = MergeParams {
                stop_cluster_count: 1,
                ..Default::default()
            };
            let c = cluster(e.view(), &params).unwrap();
            assert_eq!(c.clusters.len(), 1, "reaches a single root");
            assert!(c.merges.iter().all(|m| m.source_size <= m.target_size));
            // Replay the log: an item's cluster at least doubles whenever it is the source.
            let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
            let mut depth = vec![0usize; n];
            for m in &c.merges {
                let moved = std::mem::take(&mut members[m.source]);
                for &i in &moved {
                    depth[i] += 1;
                }
                members[m.target].extend(moved);
            }
            assert_eq!(members.iter().map(Vec::len).max(), Some(n));
            let bound = (n as f64).log2().ceil() as usize;
            assert!(depth.iter().all(|&h| h <= bound), "max depth {:?}", depth.iter().max());
        }
    }

    #[test]
    fn deterministic_and_approximate_path_partitions() {
        let e = directions_instance(9, 3000, 20, 0.1);
        let params = MergeParams {
            stop_cluster_count: 20,
            exact_threshold: 256,
            ..Default::default()
        };
        let a = cluster(e.view(), &params).unwrap();
        let b = cluster(e.view(), &params).unwrap();
        assert_eq!(a, b);
        assert!(a.approximate_rounds > 0);
        assert_eq!(a.clusters.len(), 20);
        let mut all: Vec<usize> = a.clusters.iter().flat_map(|c| c.members.clone()).collect();
        all.sort();
        assert_eq!(all, (0..3000).collect::<Vec<_>>());
        for c in &a.clusters {
            assert!((dot(&c.centroid, &c.centroid).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pseudo_label_examples() {
        let mk = |members: Vec<usize>| Cluster {
            id: 0,
            members,
            centroid: vec![1.0],
            member_sum: vec![1.0],
            pseudo_label: None,
            confidence: None,
        };
        // Class 2 at probability 0.9 for every member.
        let ln = |p: f64| p.ln();
        let row = [ln(0.05), ln(0.025), ln(0.9), ln(0.025)];
        let logits = Array2::from_shape_fn((3, 4), |(_, j)| row[j]);
        let mut cs = vec![mk(vec![0, 1, 2])];
        assign_pseudo_labels(&mut cs, logits.view()).unwrap();
        assert_eq!(cs[0].pseudo_label, Some(2));
        assert!((cs[0].confidence.unwrap() - 0.9).abs() < 1e-12);

        // Exact tie between classes 1 and 3.
        let tie = array![[0.0, 5.0, 0.0, 5.0]];
        let mut cs = vec![mk(vec![0])];
        assign_pseudo_labels(&mut cs, tie.view()).unwrap();
        assert_eq!(cs[0].pseudo_label, Some(1));

        // 60/40 mix of confident predictions for classes 0 and 1.
        let mut logits = Array2::zeros((10, 2));
        for i in 0..10 {
            logits[[i, usize::from(i >= 6)]] = 6.0;
        }
        let mut cs = vec![mk((0..10).collect())];
        assign_pseudo_labels(&mut cs, logits.view()).unwrap();
        assert_eq!(cs[0].pseudo_label, Some(0));
    }
}
