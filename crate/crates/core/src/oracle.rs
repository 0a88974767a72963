//! Slow, direct reference implementations used to cross-check the fast
//! paths in tests. Nothing here is used by the pipeline itself.

use ndarray::ArrayView2;

/// Exhaustive re-implementation of the round-based merge schedule: every
/// round recomputes all centroids from their members and scans every pair.
/// Returns the final partition (sorted member lists, sorted).
pub fn brute_force_cluster(embeddings: ArrayView2<f64>, stop: usize, max_rounds: usize) -> Vec<Vec<usize>> {
    let rows: Vec<Vec<f64>> = embeddings
        .outer_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    let d = embeddings.ncols();
    // (id, members)
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..rows.len()).map(|i| (i, vec![i])).collect();
    let stop = stop.max(1);
    let mut round = 0;
    while clusters.len() > stop && round < max_rounds {
        round += 1;
        let centroids: Vec<Vec<f64>> = clusters
            .iter()
            .map(|(_, members)| {
                let mut sorted = members.clone();
                sorted.sort_unstable();
                let mut s = vec![0.0; d];
                for &m in &sorted {
                    for j in 0..d {
                        s[j] += rows[m][j];
                    }
                }
                let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                s.iter().map(|x| x / n).collect()
            })
            .collect();
        let mut proposals: Vec<(f64, usize, usize)> = Vec::new();
        for a in 0..clusters.len() {
            let mut best: Option<(f64, usize)> = None;
            for b in 0..clusters.len() {
                if a == b {
                    continue;
                }
                let cos: f64 = (0..d).map(|j| centroids[a][j] * centroids[b][j]).sum();
                let dist = 1.0 - cos;
                let dm = (clusters[a].1.len() * clusters[b].1.len()) as f64 * dist * dist;
                let better = match best {
                    None => true,
                    Some((bd, bb)) => dm < bd || (dm == bd && clusters[b].0 < clusters[bb].0),
                };
                if better {
                    best = Some((dm, b));
                }
            }
            let Some((dm, b)) = best else { continue };
            let (sa, sb) = (clusters[a].1.len(), clusters[b].1.len());
            let (ia, ib) = (clusters[a].0, clusters[b].0);
            if sa < sb {
                proposals.push((dm, ia, ib));
            } else if sa == sb {
                proposals.push((dm, ia.min(ib), ia.max(ib)));
            }
        }
        proposals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        proposals.dedup_by(|x, y| x.1 == y.1 && x.2 == y.2);
        let mut used: Vec<usize> = Vec::new();
        let mut merged = false;
        for (_, src, tgt) in proposals {
            if clusters.len() <= stop {
                break;
            }
            if used.contains(&src) || used.contains(&tgt) {
                continue;
            }
            used.push(src);
            used.push(tgt);
            let si = clusters.iter().position(|c| c.0 == src).unwrap();
            let (_, moved) = clusters.remove(si);
            let ti = clusters.iter().position(|c| c.0 == tgt).unwrap();
            clusters[ti].1.extend(moved);
            merged = true;
        }
        if !merged {
            break;
        }
    }
    let mut out: Vec<Vec<usize>> = clusters
        .into_iter()
        .map(|(_, mut m)| {
            m.sort_unstable();
            m
        })
        .collect();
    out.sort();
    out
}

/// Per-class precision, recall, F1 and their macro means, obtained by
/// counting flows class by class. Classes never seen in either sequence are
/// left out of the macro mean.
pub fn counting_prf(predicted: &[usize], truth: &[usize], num_classes: usize) -> (Vec<[f64; 3]>, [f64; 3]) {
    let mut per_class = Vec::with_capacity(num_classes);
    let mut sums = [0.0; 3];
    let mut present = 0usize;
    for c in 0..num_classes {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push([precision, recall, f1]);
        if tp + fp + fn_ > 0 {
            present += 1;
            sums[0] += precision;
            sums[1] += recall;
            sums[2] += f1;
        }
    }
    let k = present.max(1) as f64;
    (per_class, [sums[0] / k, sums[1] / k, sums[2] / k])
}

/// Mean cosine distance from `x` to each listed row, computed pairwise.
pub fn mean_cosine_distance(x: &[f64], rows: ArrayView2<f64>, members: &[usize]) -> f64 {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let total: f64 = members
        .iter()
        .map(|&m| {
            let r = rows.row(m);
            let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos: f64 = x.iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>() / (nx * nr);
            1.0 - cos
        })
        .sum();
    total / members.len() as f64
}
