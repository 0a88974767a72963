//! Training objectives and their analytic gradients.
//!
//! All batch inputs are row-major `N × dim` matrices. Gradients are returned
//! with respect to the embeddings (trunk output) and/or the logits (head
//! output); the student backpropagates them through the network.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::softmax_into;
use crate::rng::Rng;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// How the triplet set of a batch is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TripletPolicy {
    /// Every valid (anchor, positive, negative) in the batch.
    All,
    /// Every valid triplet, uniformly subsampled down to `cap` when larger.
    BatchAll { cap: usize },
}

impl Default for TripletPolicy {
    fn default() -> Self {
        TripletPolicy::BatchAll { cap: 512 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the triplet term inside the cluster loss.
    pub beta: f64,
    /// Weight of the cluster loss in the full objective.
    pub lambda: f64,
    /// Triplet floor.
    pub margin: f64,
    pub triplet_policy: TripletPolicy,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 0.1,
            margin: 0.2,
            triplet_policy: TripletPolicy::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !self.margin.is_finite() {
            return Err(Error::Config("margin must be finite".into()));
        }
        Ok(())
    }
}

/// A scalar loss with its gradient.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Set when a probability had to be clamped at [`PROB_FLOOR`].
    pub clamped: bool,
}

/// Per-term values of a composite objective (for the training trace).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub center: f64,
    pub triplet: f64,
    pub mse: f64,
    pub kl: f64,
}

impl LossBreakdown {
    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.total += w * other.total;
        self.cls += w * other.cls;
        self.center += w * other.center;
        self.triplet += w * other.triplet;
        self.mse += w * other.mse;
        self.kl += w * other.kl;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.cls, self.center, self.triplet, self.mse, self.kl]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Gradients of a composite objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    pub grad_embeddings: Array2<f64>,
    pub grad_logits: Array2<f64>,
    pub clamped: bool,
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (row, mut o) in logits.outer_iter().zip(out.outer_iter_mut()) {
        softmax_into(
            row.as_slice().expect("standard layout"),
            o.as_slice_mut().expect("standard layout"),
        );
    }
    out
}

fn check_labels(labels: &[usize], n: usize, num_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dims("labels", n, labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label: l, num_classes });
    }
    Ok(())
}

/// Mean cross-entropy of `probs` against the true classes; the gradient is
/// taken with respect to the logits that produced `probs`: `(p - y) / N`.
pub fn classification_loss(probs: ArrayView2<f64>, labels: &[usize]) -> Result<LossGrad> {
    let (n, c) = probs.dim();
    check_labels(labels, n, c)?;
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut clamped = false;
    let mut grad = probs.to_owned();
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[[i, y]];
        if p < PROB_FLOOR {
            clamped = true;
        }
        value -= p.max(PROB_FLOOR).ln();
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g * inv_n);
    Ok(LossGrad {
        value: value * inv_n,
        grad,
        clamped,
    })
}

/// Per-class centroids updated by exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank {
    centroids: Array2<f64>,
    initialized: Vec<bool>,
    momentum: f64,
}

impl CentroidBank {
    pub fn new(num_classes: usize, dim: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("centroid momentum must lie in (0, 1), got {momentum}")));
        }
        Ok(Self {
            centroids: Array2::zeros((num_classes, dim)),
            initialized: vec![false; num_classes],
            momentum,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.initialized.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized.get(class).copied().unwrap_or(false)
    }

    pub fn centroid(&self, class: usize) -> Option<ArrayView1<'_, f64>> {
        self.is_initialized(class).then(|| self.centroids.row(class))
    }

    /// Sets a centroid directly (marks it initialized).
    pub fn set(&mut self, class: usize, centroid: &[f64]) {
        self.centroids.row_mut(class).assign(&ArrayView1::from(centroid));
        self.initialized[class] = true;
    }

    fn class_means(&self, embeddings: ArrayView2<f64>, labels: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let mut sums = Array2::zeros(self.centroids.raw_dim());
        let mut counts = vec![0usize; self.num_classes()];
        for (row, &y) in embeddings.outer_iter().zip(labels) {
            let mut s = sums.row_mut(y);
            s += &row;
            counts[y] += 1;
        }
        for (mut s, &k) in sums.outer_iter_mut().zip(&counts) {
            if k > 0 {
                s /= k as f64;
            }
        }
        (sums, counts)
    }

    /// Initializes any class present in the batch that has no centroid yet
    /// to its batch mean.
    pub fn initialize_missing(&mut self, embeddings: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        check_labels(labels, embeddings.nrows(), self.num_classes())?;
        let (means, counts) = self.class_means(embeddings, labels);
        for c in 0..self.num_classes() {
            if counts[c] > 0 && !self.initialized[c] {
                self.centroids.row_mut(c).assign(&means.row(c));
                self.initialized[c] = true;
            }
        }
        Ok(())
    }

    /// `c ← α c + (1 − α) · mean(batch members of c)` for every class in the
    /// batch; a class seen for the first time takes the batch mean.
    pub fn update(&mut self, embeddings: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        check_labels(labels, embeddings.nrows(), self.num_classes())?;
        let (means, counts) = self.class_means(embeddings, labels);
        let a = self.momentum;
        for c in 0..self.num_classes() {
            if counts[c] == 0 {
                continue;
            }
            if self.initialized[c] {
                let updated = &self.centroids.row(c) * a + &means.row(c) * (1.0 - a);
                self.centroids.row_mut(c).assign(&updated);
            } else {
                self.centroids.row_mut(c).assign(&means.row(c));
                self.initialized[c] = true;
            }
        }
        Ok(())
    }
}

/// Accumulates `scale · ∂cos(u, v)/∂u` into `out`, returning `cos(u, v)`.
fn cos_grad_into(u: ArrayView1<f64>, v: ArrayView1<f64>, scale: f64, mut out: ndarray::ArrayViewMut1<f64>) -> Result<f64> {
    let nu2 = u.dot(&u);
    let nv = v.dot(&v).sqrt();
    if nu2 == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let nu = nu2.sqrt();
    let cos = u.dot(&v) / (nu * nv);
    let a = scale / (nu * nv);
    let b = scale * cos / nu2;
    out.zip_mut_with(&u, |o, &ui| *o -= b * ui);
    out.scaled_add(a, &v);
    Ok(cos)
}

/// `(1/N) Σ (1 − cos(h_i, c_{y_i}))`, centroids held constant.
pub fn center_loss(embeddings: ArrayView2<f64>, labels: &[usize], bank: &CentroidBank) -> Result<LossGrad> {
    let n = embeddings.nrows();
    check_labels(labels, n, bank.num_classes())?;
    if embeddings.ncols() != bank.dim() {
        return Err(Error::dims("center_loss embeddings", bank.dim(), embeddings.ncols()));
    }
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Array2::zeros(embeddings.raw_dim());
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let c = bank.centroid(y).ok_or(Error::UninitializedCentroid(y))?;
        let cos = cos_grad_into(embeddings.row(i), c, -inv_n, grad.row_mut(i))?;
        value += 1.0 - cos;
    }
    Ok(LossGrad {
        value: value * inv_n,
        grad,
        clamped: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Builds the triplet set for a batch. Empty when the batch lacks either two
/// classes or a class with two members.
pub fn select_triplets(labels: &[usize], policy: TripletPolicy, rng: &mut Rng) -> Vec<Triplet> {
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let n = labels.len();
    // Triplets are enumerated anchor-major: for anchor a, positive rank r
    // and negative rank s map to offset r * negatives + s.
    let mut offsets = Vec::with_capacity(n + 1);
    let mut total = 0usize;
    offsets.push(0);
    for &y in labels {
        let same = members[y].len();
        total += (same - 1) * (n - same);
        offsets.push(total);
    }
    let picks: Vec<usize> = match policy {
        TripletPolicy::BatchAll { cap } if total > cap => rng.sample_indices(total, cap),
        _ => (0..total).collect(),
    };
    let negatives_of = |y: usize, s: usize| -> usize {
        // s-th index (ascending) whose label is not y
        let mut skip = s;
        let mut lo = 0;
        for &m in &members[y] {
            let gap = m - lo;
            if skip < gap {
                return lo + skip;
            }
            skip -= gap;
            lo = m + 1;
        }
        lo + skip
    };
    picks
        .into_iter()
        .map(|t| {
            let a = offsets.partition_point(|&o| o <= t) - 1;
            let y = labels[a];
            let within = t - offsets[a];
            let negs = n - members[y].len();
            let (r, s) = (within / negs, within % negs);
            let pa = members[y].binary_search(&a).expect("anchor is a member of its class");
            let p = if r < pa { members[y][r] } else { members[y][r + 1] };
            Triplet {
                anchor: a,
                positive: p,
                negative: negatives_of(y, s),
            }
        })
        .collect()
}

/// `(1/|T|) Σ max(cos(h_a, h_n) − cos(h_a, h_p), m)`. Floored terms carry
/// zero gradient. An empty triplet set yields zero loss.
pub fn triplet_loss(embeddings: ArrayView2<f64>, triplets: &[Triplet], margin: f64) -> Result<LossGrad> {
    let mut grad = Array2::zeros(embeddings.raw_dim());
    if triplets.is_empty() {
        return Ok(LossGrad {
            value: 0.0,
            grad,
            clamped: false,
        });
    }
    let inv_t = 1.0 / triplets.len() as f64;
    let mut value = 0.0;
    let mut scratch = Array1::zeros(embeddings.ncols());
    for t in triplets {
        let (a, p, n) = (embeddings.row(t.anchor), embeddings.row(t.positive), embeddings.row(t.negative));
        scratch.fill(0.0);
        let cos_an = cos_grad_into(a, n, inv_t, scratch.view_mut())?;
        let cos_ap = cos_grad_into(a, p, -inv_t, scratch.view_mut())?;
        let term = cos_an - cos_ap;
        if term > margin {
            value += term;
            let mut ga = grad.row_mut(t.anchor);
            ga += &scratch;
            cos_grad_into(n, a, inv_t, grad.row_mut(t.negative))?;
            cos_grad_into(p, a, -inv_t, grad.row_mut(t.positive))?;
        } else {
            value += margin;
        }
    }
    Ok(LossGrad {
        value: value * inv_t,
        grad,
        clamped: false,
    })
}

/// Center loss plus `beta` times triplet loss.
#[derive(Debug, Clone)]
pub struct ClusterLoss {
    pub value: f64,
    pub center: f64,
    pub triplet: f64,
    pub grad: Array2<f64>,
}

pub fn cluster_loss(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    bank: &CentroidBank,
    triplets: &[Triplet],
    weights: &LossWeights,
) -> Result<ClusterLoss> {
    let center = center_loss(embeddings, labels, bank)?;
    let triplet = triplet_loss(embeddings, triplets, weights.margin)?;
    let mut grad = center.grad;
    grad.scaled_add(weights.beta, &triplet.grad);
    Ok(ClusterLoss {
        value: center.value + weights.beta * triplet.value,
        center: center.value,
        triplet: triplet.value,
        grad,
    })
}

/// Classification loss plus `lambda` times cluster loss.
pub fn cfe_loss(
    logits: ArrayView2<f64>,
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    bank: &CentroidBank,
    triplets: &[Triplet],
    weights: &LossWeights,
) -> Result<Objective> {
    let probs = softmax_rows(logits);
    let cls = classification_loss(probs.view(), labels)?;
    let mut breakdown = LossBreakdown {
        cls: cls.value,
        total: cls.value,
        ..Default::default()
    };
    let grad_embeddings = if weights.lambda != 0.0 {
        let clus = cluster_loss(embeddings, labels, bank, triplets, weights)?;
        breakdown.center = clus.center;
        breakdown.triplet = clus.triplet;
        breakdown.total += weights.lambda * clus.value;
        clus.grad * weights.lambda
    } else {
        Array2::zeros(embeddings.raw_dim())
    };
    Ok(Objective {
        breakdown,
        grad_embeddings,
        grad_logits: cls.grad,
        clamped: cls.clamped,
    })
}

/// `(1/2N) Σ_i [ (1/d) Σ_j (ĥ_ij − h_ij)² + Σ_c p_ic log(p_ic / p̂_ic) ]`
/// with `p̂ = softmax(student_logits)`.
pub fn distillation_loss(
    student_embeddings: ArrayView2<f64>,
    teacher_embeddings: ArrayView2<f64>,
    student_logits: ArrayView2<f64>,
    teacher_probs: ArrayView2<f64>,
) -> Result<Objective> {
    let (n, d) = student_embeddings.dim();
    if teacher_embeddings.dim() != (n, d) {
        return Err(Error::dims("teacher embeddings", d, teacher_embeddings.ncols()));
    }
    if student_logits.dim() != teacher_probs.dim() || student_logits.nrows() != n {
        return Err(Error::dims("teacher probs", student_logits.ncols(), teacher_probs.ncols()));
    }
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / (2.0 * n as f64);
    let diff = &student_embeddings - &teacher_embeddings;
    let mse: f64 = diff.map(|x| x * x).sum_axis(Axis(1)).sum() / d as f64;
    let grad_embeddings = diff * (2.0 * scale / d as f64);

    let probs = softmax_rows(student_logits);
    let mut kl = 0.0;
    let mut clamped = false;
    for (p_row, q_row) in teacher_probs.outer_iter().zip(probs.outer_iter()) {
        for (&p, &q) in p_row.iter().zip(q_row.iter()) {
            if p > 0.0 {
                if q < PROB_FLOOR {
                    clamped = true;
                }
                kl += p * (p.ln() - q.max(PROB_FLOOR).ln());
            }
        }
    }
    // ∂KL/∂z = p̂ − p for rows of p summing to one.
    let grad_logits = (&probs - &teacher_probs) * scale;
    Ok(Objective {
        breakdown: LossBreakdown {
            total: scale * (mse + kl),
            mse: mse / n as f64,
            kl: kl / n as f64,
            ..Default::default()
        },
        grad_embeddings,
        grad_logits,
        clamped,
    })
}
