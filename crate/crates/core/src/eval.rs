//! Scoring: macro precision/recall/F1, cluster purity, novelty capture, ASI
//! threshold sweeps and clustering scaling runs.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asi::Discriminant;
use crate::cluster::{time_cluster, Cluster, MergeParams};
use crate::error::{Error, Result};
use crate::pipeline::{
    all_fallback, prepare, route_flows, Decision, InferConfig, Oracle, Prepared, RoutingDecision, SimulatedOracle,
    TeacherOracle,
};
use crate::student::StudentModel;
use crate::types::FlowRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Flows whose true class is this one.
    pub support: usize,
    pub predicted: usize,
    /// A zero denominator forced some score to 0.
    pub zero_denominator: bool,
    /// Neither predicted nor present; left out of the macro means.
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub per_class: Vec<ClassScore>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub scored: usize,
}

/// Per-class and macro precision, recall and F1 from a confusion count.
/// The macro mean runs over classes that occur in `truth` or `predicted`.
pub fn macro_prf(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<PrfReport> {
    if predicted.is_empty() {
        return Err(Error::Empty("scored flows"));
    }
    if predicted.len() != truth.len() {
        return Err(Error::dims("predictions vs. ground truth", truth.len(), predicted.len()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred = vec![0usize; num_classes];
    let mut actual = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        for label in [p, t] {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange { label, num_classes });
            }
        }
        pred[p] += 1;
        actual[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class: Vec<ClassScore> = (0..num_classes)
        .map(|c| {
            let precision = ratio(tp[c], pred[c]);
            let recall = ratio(tp[c], actual[c]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScore {
                class: c,
                precision,
                recall,
                f1,
                support: actual[c],
                predicted: pred[c],
                zero_denominator: pred[c] == 0 || actual[c] == 0,
                absent: pred[c] == 0 && actual[c] == 0,
            }
        })
        .collect();
    let present: Vec<&ClassScore> = per_class.iter().filter(|c| !c.absent).collect();
    let mean = |f: fn(&ClassScore) -> f64| present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64;
    Ok(PrfReport {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
        scored: predicted.len(),
    })
}

/// Ground truth by flow id.
pub fn truth_map(flows: &[FlowRecord]) -> BTreeMap<&str, usize> {
    flows
        .iter()
        .filter_map(|f| f.label.map(|l| (f.id.as_str(), l)))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub scored: usize,
    pub novel_excluded: usize,
    pub errored_excluded: usize,
    pub unlabeled_excluded: usize,
}

/// (predicted, truth) pairs for flows that received a label and have ground
/// truth. Novel candidates and errored flows are not scored.
pub fn scored_pairs(
    decisions: &[RoutingDecision],
    truth: &BTreeMap<&str, usize>,
) -> (Vec<usize>, Vec<usize>, DecisionCounts) {
    let mut p = Vec::new();
    let mut t = Vec::new();
    let mut counts = DecisionCounts::default();
    for d in decisions {
        match (&d.decision, truth.get(d.flow_id.as_str())) {
            (Decision::NovelCandidate, _) => counts.novel_excluded += 1,
            (Decision::Errored { .. }, _) => counts.errored_excluded += 1,
            (_, None) => counts.unlabeled_excluded += 1,
            (dec, Some(&label)) => {
                p.push(dec.label().expect("labeled decision"));
                t.push(label);
                counts.scored += 1;
            }
        }
    }
    (p, t, counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    /// Majority-class fraction per cluster (clusters without labeled members are skipped).
    pub per_cluster: Vec<(usize, f64)>,
    /// Mean purity weighted by labeled cluster size.
    pub weighted: f64,
    pub labeled_items: usize,
}

/// Majority-ground-truth fraction of each cluster; `truth[i]` labels item `i`.
pub fn cluster_purity(clusters: &[Cluster], truth: &[Option<usize>]) -> Result<PurityReport> {
    let mut per_cluster = Vec::with_capacity(clusters.len());
    let mut hits = 0usize;
    let mut total = 0usize;
    for c in clusters {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &m in &c.members {
            let label = *truth.get(m).ok_or_else(|| Error::dims("purity ground truth", m + 1, truth.len()))?;
            if let Some(l) = label {
                *counts.entry(l).or_default() += 1;
            }
        }
        let size: usize = counts.values().sum();
        if size == 0 {
            continue;
        }
        let majority = *counts.values().max().expect("nonempty");
        per_cluster.push((c.id, majority as f64 / size as f64));
        hits += majority;
        total += size;
    }
    if total == 0 {
        return Err(Error::Empty("labeled cluster members"));
    }
    Ok(PurityReport {
        per_cluster,
        weighted: hits as f64 / total as f64,
        labeled_items: total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyScore {
    /// Held-out flows reported as novel candidates, over all held-out flows.
    pub recall: f64,
    /// Other flows reported as novel candidates, over all other flows.
    pub false_flag_rate: f64,
    pub holdout_flows: usize,
    pub holdout_flagged: usize,
    pub other_flows: usize,
    pub other_flagged: usize,
}

pub fn novelty_score(
    decisions: &[RoutingDecision],
    truth: &BTreeMap<&str, usize>,
    holdout_classes: &[usize],
) -> NoveltyScore {
    let (mut ho, mut ho_f, mut other, mut other_f) = (0, 0, 0, 0);
    for d in decisions {
        let Some(label) = truth.get(d.flow_id.as_str()) else {
            continue;
        };
        let flagged = d.decision.is_novel();
        if holdout_classes.contains(label) {
            ho += 1;
            ho_f += usize::from(flagged);
        } else {
            other += 1;
            other_f += usize::from(flagged);
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    NoveltyScore {
        recall: frac(ho_f, ho),
        false_flag_rate: frac(other_f, other),
        holdout_flows: ho,
        holdout_flagged: ho_f,
        other_flows: other,
        other_flagged: other_f,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    Eta,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Self::Gamma),
            "eta" => Ok(Self::Eta),
            other => Err(Error::Config(format!("unknown sweep parameter `{other}` (gamma|eta)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub fast_path_fraction: f64,
    /// Accuracy of fast-path labels; `None` when nothing took the fast path.
    pub fast_path_precision: Option<f64>,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub timing: SweepTiming,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTiming {
    /// Shared embedding/clustering/ASI time plus this point's routing and oracle time.
    pub hybrid: f64,
}

/// Routes the prepared flows once per grid value, varying one threshold of
/// `base` and reusing embeddings and clustering.
pub fn asi_sweep(
    prepared: &Prepared,
    flows: &[FlowRecord],
    oracle: &dyn Oracle,
    base: &Discriminant,
    vary: SweepParam,
    grid: &[f64],
    oracle_batch_size: usize,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let truth = truth_map(flows);
    let num_classes = prepared.output.logits.ncols();
    grid.par_iter()
        .map(|&threshold| {
            let mut d = *base;
            match vary {
                SweepParam::Gamma => d.gamma = threshold,
                SweepParam::Eta => d.eta = threshold,
            }
            let outcome = route_flows(prepared, flows, oracle, &d, oracle_batch_size)?;
            let (mut fp_hits, mut fp_total) = (0usize, 0usize);
            for r in &outcome.decisions {
                if let (Decision::FastPath { label }, Some(t)) = (&r.decision, truth.get(r.flow_id.as_str())) {
                    fp_total += 1;
                    fp_hits += usize::from(label == t);
                }
            }
            let (p, t, _) = scored_pairs(&outcome.decisions, &truth);
            let (macro_precision, macro_f1) = if p.is_empty() {
                (0.0, 0.0)
            } else {
                let r = macro_prf(&p, &t, num_classes)?;
                (r.macro_precision, r.macro_f1)
            };
            Ok(SweepRow {
                threshold,
                fast_path_fraction: outcome.summary.fast_path_fraction,
                fast_path_precision: (fp_total > 0).then(|| fp_hits as f64 / fp_total as f64),
                macro_precision,
                macro_f1,
                timing: SweepTiming {
                    hybrid: outcome.summary.timing.hybrid,
                },
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("threshold,fast_path_fraction,fast_path_precision,macro_precision,macro_f1,time\n");
    for r in rows {
        let fpp = r.fast_path_precision.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.threshold, r.fast_path_fraction, fpp, r.macro_precision, r.macro_f1, r.timing.hybrid
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub seconds: f64,
    pub clusters: usize,
    pub rounds: usize,
}

/// Clusters the first `n` rows for each requested size.
pub fn cluster_scaling(embeddings: ArrayView2<f64>, sizes: &[usize], params: &MergeParams) -> Result<Vec<ScalingRow>> {
    sizes
        .iter()
        .map(|&n| {
            if n > embeddings.nrows() {
                return Err(Error::dims("scaling sample", n, embeddings.nrows()));
            }
            let (c, seconds) = time_cluster(embeddings.slice(ndarray::s![..n, ..]), params)?;
            Ok(ScalingRow {
                n,
                seconds,
                clusters: c.clusters.len(),
                rounds: c.rounds,
            })
        })
        .collect()
}

/// Hybrid versus all-fallback wall-clock on a simulated teacher whose
/// per-flow latency is `latency_multiplier` times the measured student
/// embedding latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub flows: usize,
    pub anchors: usize,
    pub student_per_flow: f64,
    pub oracle_per_flow: f64,
    pub fast_path_fraction: f64,
    pub hybrid: f64,
    pub all_fallback: f64,
    pub speedup: f64,
}

pub fn hybrid_speedup(
    model: &StudentModel,
    flows: &[FlowRecord],
    anchors: &[&FlowRecord],
    config: &InferConfig,
    latency_multiplier: f64,
) -> Result<SpeedupReport> {
    if !(latency_multiplier.is_finite() && latency_multiplier > 0.0) {
        return Err(Error::Config("latency multiplier must be positive".into()));
    }
    let prepared = prepare(model, flows, anchors, config)?;
    let student_per_flow = prepared.student_latency();
    let oracle = TeacherOracle::Simulated(SimulatedOracle {
        latency_per_flow: latency_multiplier * student_per_flow,
        ..SimulatedOracle::perfect(model.num_classes())
    });
    let outcome = route_flows(&prepared, flows, &oracle, &config.discriminant, config.oracle_batch_size)?;
    let (_, all_fallback_secs) = all_fallback(flows, &oracle, config.oracle_batch_size);
    let hybrid = outcome.summary.timing.hybrid;
    Ok(SpeedupReport {
        flows: flows.len(),
        anchors: anchors.len(),
        student_per_flow,
        oracle_per_flow: latency_multiplier * student_per_flow,
        fast_path_fraction: outcome.summary.fast_path_fraction,
        hybrid,
        all_fallback: all_fallback_secs,
        speedup: all_fallback_secs / hybrid,
    })
}
