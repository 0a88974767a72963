//! Affiliation Strength Index.
//!
//! For a flow, `ratio` is the share of its `k` nearest clusters (by centroid
//! cosine distance, the nearest included) carrying the nearest cluster's
//! pseudo-label, and `strength` is `|d_inter − d_intra| / max(d_inter, d_intra)`
//! with `d_intra` the mean cosine distance to the members of the nearest
//! cluster and `d_inter` the same for the second-nearest cluster.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::math::{dot, normalized};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsiValue {
    pub ratio: f64,
    pub strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Discriminant {
    pub gamma: f64,
    pub eta: f64,
    /// Neighboring clusters consulted for the ratio.
    pub k: usize,
    pub novelty_gamma: f64,
    pub novelty_eta: f64,
}

impl Default for Discriminant {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            eta: 0.5,
            k: 5,
            novelty_gamma: 0.3,
            novelty_eta: 0.6,
        }
    }
}

impl Discriminant {
    pub fn with_thresholds(gamma: f64, eta: f64) -> Self {
        Self {
            gamma,
            eta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("ASI neighbor count k must be >= 1".into()));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("novelty_gamma", self.novelty_gamma),
            ("novelty_eta", self.novelty_eta),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    FastPath,
    Fallback,
}

/// Fast path iff `ratio > γ` and `strength > η`.
pub fn route(asi: AsiValue, discriminant: &Discriminant) -> Route {
    if asi.ratio > discriminant.gamma && asi.strength > discriminant.eta {
        Route::FastPath
    } else {
        Route::Fallback
    }
}

/// Cohesive but unaligned: `ratio < γ_nov` and `strength > η_nov`.
pub fn flag_novel(asi: AsiValue, discriminant: &Discriminant) -> bool {
    asi.ratio < discriminant.novelty_gamma && asi.strength > discriminant.novelty_eta
}

/// Frozen view of a clustering for ASI queries.
#[derive(Debug, Clone)]
pub struct ClusterIndex {
    dim: usize,
    centroids: Vec<f64>,
    /// `member_sum / size`: the mean of unit member embeddings.
    mean_directions: Vec<f64>,
    labels: Vec<Option<usize>>,
}

/// ASI of one flow plus the clusters it was measured against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleAsi {
    pub value: AsiValue,
    /// Position (in the index) of the nearest cluster.
    pub nearest: usize,
    pub second: Option<usize>,
    /// Fewer than `k` clusters (or fewer than two) were available.
    pub partial: bool,
}

impl ClusterIndex {
    pub fn new(clusters: &[Cluster]) -> Result<Self> {
        let first = clusters.first().ok_or(Error::Empty("clusters"))?;
        let dim = first.centroid.len();
        let mut centroids = Vec::with_capacity(clusters.len() * dim);
        let mut mean_directions = Vec::with_capacity(clusters.len() * dim);
        for c in clusters {
            if c.centroid.len() != dim || c.member_sum.len() != dim {
                return Err(Error::dims("cluster centroid", dim, c.centroid.len()));
            }
            if c.members.is_empty() {
                return Err(Error::Empty("cluster members"));
            }
            centroids.extend(normalized(&c.centroid)?);
            let inv = 1.0 / c.size() as f64;
            mean_directions.extend(c.member_sum.iter().map(|x| x * inv));
        }
        Ok(Self {
            dim,
            centroids,
            mean_directions,
            labels: clusters.iter().map(|c| c.pseudo_label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, pos: usize) -> Option<usize> {
        self.labels[pos]
    }

    fn row<'a>(&self, data: &'a [f64], pos: usize) -> &'a [f64] {
        &data[pos * self.dim..(pos + 1) * self.dim]
    }

    /// ASI of a flow embedding (any nonzero scale).
    pub fn sample_asi(&self, embedding: &[f64], k: usize) -> Result<SampleAsi> {
        if embedding.len() != self.dim {
            return Err(Error::dims("ASI embedding", self.dim, embedding.len()));
        }
        let x = normalized(embedding)?;
        self.sample_asi_unit(&x, k)
    }

    fn sample_asi_unit(&self, x: &[f64], k: usize) -> Result<SampleAsi> {
        let m = self.len();
        let mut order: Vec<(f64, usize)> = (0..m).map(|p| (1.0 - dot(x, self.row(&self.centroids, p)), p)).collect();
        let k_eff = k.min(m).max(1);
        let take = k_eff.max(2).min(m);
        if take < m {
            order.select_nth_unstable_by(take - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order.truncate(take);
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nearest = order[0].1;
        let target = self.labels[nearest];
        let matches = order[..k_eff]
            .iter()
            .filter(|(_, p)| target.is_some() && self.labels[*p] == target)
            .count();
        let ratio = matches as f64 / k_eff as f64;
        let second = order.get(1).map(|o| o.1);
        let strength = match second {
            Some(s) => {
                let d_intra = (1.0 - dot(x, self.row(&self.mean_directions, nearest))).max(0.0);
                let d_inter = (1.0 - dot(x, self.row(&self.mean_directions, s))).max(0.0);
                let denom = d_inter.max(d_intra);
                if denom > 0.0 {
                    ((d_inter - d_intra).abs() / denom).min(1.0)
                } else {
                    0.0
                }
            }
            None => 0.0,
        };
        Ok(SampleAsi {
            value: AsiValue { ratio, strength },
            nearest,
            second,
            partial: m < k || second.is_none(),
        })
    }

    /// ASI of every row of `embeddings`, in row order.
    pub fn evaluate(&self, embeddings: ArrayView2<f64>, k: usize) -> Result<Vec<SampleAsi>> {
        let rows: Vec<Vec<f64>> = embeddings.outer_iter().map(|r| r.to_vec()).collect();
        rows.par_iter().map(|r| self.sample_asi(r, k)).collect()
    }

    /// Ratio measured with the cluster's own centroid as the query.
    pub fn centroid_ratio(&self, pos: usize, k: usize) -> Result<f64> {
        let centroid = self.row(&self.centroids, pos).to_vec();
        Ok(self.sample_asi_unit(&centroid, k)?.value.ratio)
    }

    /// Cluster-level ASI: the ratio measured at the cluster centroid and the
    /// mean strength of its members.
    pub fn cluster_asi(&self, pos: usize, member_strengths: &[f64], k: usize) -> Result<AsiValue> {
        if member_strengths.is_empty() {
            return Err(Error::Empty("cluster members"));
        }
        let ratio = self.centroid_ratio(pos, k)?;
        let strength = member_strengths.iter().sum::<f64>() / member_strengths.len() as f64;
        Ok(AsiValue { ratio, strength })
    }
}
