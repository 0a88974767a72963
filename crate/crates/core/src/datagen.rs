//! Seeded synthetic workloads: flows with ground truth, a synthetic teacher,
//! and a manifest recording how separable the classes are.
//!
//! Class directions are unit vectors with an exact pairwise angle. Each class
//! may be split into several modes, each a rotation of the class direction by
//! `mode_spread` radians toward a random orthogonal direction. A flow is its
//! mode center plus isotropic Gaussian noise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_flows, write_teacher, DatasetManifest};
use crate::math::{dot, norm, softmax_unchecked};
use crate::rng::Rng;
use crate::types::{FlowRecord, LabeledDataset, TeacherMap, TeacherOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Training flows per (non-holdout) class.
    pub flows_per_class: usize,
    /// Test flows per class, holdout classes included.
    pub test_flows_per_class: usize,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    /// Angle between any two class directions, in radians, within (0, π/2].
    pub separation: f64,
    /// Per-coordinate standard deviation of feature noise.
    pub noise: f64,
    pub modes_per_class: usize,
    /// Angle between a mode center and its class direction, in radians.
    pub mode_spread: f64,
    /// Classes that appear in the test split only.
    pub holdout_classes: Vec<usize>,
    pub teacher_noise: f64,
    /// Logit scale of the teacher's one-hot.
    pub teacher_scale: f64,
    /// Probability that the teacher's top class is a uniformly chosen wrong one.
    pub flip_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            flows_per_class: 100,
            test_flows_per_class: 100,
            feature_dim: 16,
            embedding_dim: 8,
            separation: std::f64::consts::FRAC_PI_2,
            noise: 0.05,
            modes_per_class: 1,
            mode_spread: 0.0,
            holdout_classes: Vec::new(),
            teacher_noise: 0.01,
            teacher_scale: 8.0,
            flip_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// The reference workload used by the acceptance suite and benches.
    pub fn reference() -> Self {
        Self {
            num_classes: 10,
            flows_per_class: 200,
            test_flows_per_class: 200,
            feature_dim: 32,
            embedding_dim: 16,
            separation: std::f64::consts::FRAC_PI_2,
            noise: 0.02,
            modes_per_class: 10,
            mode_spread: 0.5,
            seed: 20240601,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if self.feature_dim < self.num_classes + 1 {
            return bad(format!(
                "feature_dim must be >= num_classes + 1 ({}), got {}",
                self.num_classes + 1,
                self.feature_dim
            ));
        }
        if self.embedding_dim == 0 || self.modes_per_class == 0 {
            return bad("embedding_dim and modes_per_class must be positive".into());
        }
        if !(self.separation > 0.0 && self.separation <= std::f64::consts::FRAC_PI_2) {
            return bad(format!("separation must lie in (0, pi/2], got {}", self.separation));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.mode_spread) {
            return bad(format!("mode_spread must lie in [0, pi/2), got {}", self.mode_spread));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("teacher_noise", self.teacher_noise),
            ("teacher_scale", self.teacher_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return bad(format!("flip_rate must lie in [0, 1], got {}", self.flip_rate));
        }
        if let Some(&c) = self.holdout_classes.iter().find(|&&c| c >= self.num_classes) {
            return bad(format!("holdout class {c} out of range"));
        }
        if self.holdout_classes.len() >= self.num_classes {
            return bad("at least one class must be trained on".into());
        }
        Ok(())
    }

    pub fn is_holdout(&self, class: usize) -> bool {
        self.holdout_classes.contains(&class)
    }
}

/// How well a nearest-mode-center classifier separates the generated flows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    /// Smallest distance between mode centers of different classes.
    pub min_center_gap: f64,
    /// Noise level below which nearest-center errors are negligible
    /// (projected noise stays under half the gap at six standard deviations).
    pub noise_bound: f64,
    /// Accuracy of the nearest-mode-center classifier over every generated flow.
    pub nearest_center_accuracy: f64,
    pub separable: bool,
}

const BOUND_SIGMAS: f64 = 6.0;

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Teacher records for both splits, train first.
    pub teacher: Vec<TeacherOutput>,
    pub class_directions: Vec<Vec<f64>>,
    /// `mode_centers[c][m]`.
    pub mode_centers: Vec<Vec<Vec<f64>>>,
    pub separability: Separability,
}

/// Gram-Schmidt against `basis`; `None` when `v` is (numerically) in their span.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let n = norm(&v);
    (n > 1e-9).then(|| v.into_iter().map(|x| x / n).collect())
}

fn random_orthonormal(rng: &mut Rng, dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if let Some(u) = orthonormalize(v, basis) {
            return u;
        }
    }
}

fn class_directions(spec: &SynthSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes + 1);
    for _ in 0..=spec.num_classes {
        let e = random_orthonormal(rng, spec.feature_dim, &basis);
        basis.push(e);
    }
    // u_c = cos(phi) e0 + sin(phi) e_c has u_a . u_b = cos^2(phi) = cos(separation).
    let phi = spec.separation.cos().max(0.0).sqrt().acos();
    let (c, s) = (phi.cos(), phi.sin());
    (1..=spec.num_classes)
        .map(|k| basis[0].iter().zip(&basis[k]).map(|(a, b)| c * a + s * b).collect())
        .collect()
}

fn mode_centers(spec: &SynthSpec, dirs: &[Vec<f64>], rng: &mut Rng) -> Vec<Vec<Vec<f64>>> {
    let (c, s) = (spec.mode_spread.cos(), spec.mode_spread.sin());
    dirs.iter()
        .map(|u| {
            if spec.modes_per_class == 1 || spec.mode_spread == 0.0 {
                return vec![u.clone(); spec.modes_per_class];
            }
            (0..spec.modes_per_class)
                .map(|_| {
                    let w = random_orthonormal(rng, spec.feature_dim, std::slice::from_ref(u));
                    u.iter().zip(&w).map(|(a, b)| c * a + s * b).collect()
                })
                .collect()
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_center_class(x: &[f64], centers: &[Vec<Vec<f64>>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, modes) in centers.iter().enumerate() {
        for m in modes {
            let d = sq_dist(x, m);
            if d < best.0 {
                best = (d, c);
            }
        }
    }
    best.1
}

struct Drawn {
    class: usize,
    mode: usize,
    features: Vec<f64>,
}

/// Builds the workload in memory. Deterministic in `spec`.
pub fn synthesize(spec: &SynthSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let dirs = class_directions(spec, &mut root.split(1));
    let centers = mode_centers(spec, &dirs, &mut root.split(2));

    let mut draw_rng = root.split(3);
    let mut draw = |class: usize, count: usize| -> Vec<Drawn> {
        (0..count)
            .map(|i| {
                let mode = i % spec.modes_per_class;
                let features = centers[class][mode]
                    .iter()
                    .map(|m| m + spec.noise * draw_rng.normal())
                    .collect();
                Drawn { class, mode, features }
            })
            .collect()
    };
    let mut train_raw = Vec::new();
    let mut test_raw = Vec::new();
    for c in 0..spec.num_classes {
        if !spec.is_holdout(c) {
            train_raw.extend(draw(c, spec.flows_per_class));
        }
        test_raw.extend(draw(c, spec.test_flows_per_class));
    }
    let mut order_rng = root.split(4);
    order_rng.shuffle(&mut train_raw);
    order_rng.shuffle(&mut test_raw);

    // Teacher: fixed random linear map of the noiseless mode center.
    let mut map_rng = root.split(5);
    let scale = 1.0 / (spec.feature_dim as f64).sqrt();
    let map: Vec<Vec<f64>> = (0..spec.embedding_dim)
        .map(|_| (0..spec.feature_dim).map(|_| scale * map_rng.normal()).collect())
        .collect();
    let mut teacher_rng = root.split(6);
    let mut teacher_for = |id: &str, d: &Drawn| -> TeacherOutput {
        let center = &centers[d.class][d.mode];
        let embedding = map
            .iter()
            .map(|row| dot(row, center) + spec.teacher_noise * teacher_rng.normal())
            .collect();
        let mut top = d.class;
        if teacher_rng.uniform() < spec.flip_rate {
            top = (d.class + 1 + teacher_rng.below(spec.num_classes - 1)) % spec.num_classes;
        }
        let mut logits = vec![0.0; spec.num_classes];
        logits[top] = spec.teacher_scale;
        TeacherOutput {
            flow_id: id.to_string(),
            embedding,
            probs: softmax_unchecked(&logits),
        }
    };

    let mut teacher = Vec::with_capacity(train_raw.len() + test_raw.len());
    let mut build = |prefix: &str, raw: Vec<Drawn>| -> Result<(LabeledDataset, TeacherMap)> {
        let mut flows = Vec::with_capacity(raw.len());
        let mut map = TeacherMap::new();
        for (i, d) in raw.iter().enumerate() {
            let id = format!("{prefix}-{i:06}");
            let t = teacher_for(&id, d);
            map.insert(id.clone(), t.clone());
            teacher.push(t);
            flows.push(FlowRecord::with_features(id, d.features.clone(), Some(d.class)));
        }
        Ok((LabeledDataset::new(flows, spec.num_classes)?, map))
    };

    let separability = {
        let mut gap = f64::INFINITY;
        for a in 0..spec.num_classes {
            for b in a + 1..spec.num_classes {
                for ma in &centers[a] {
                    for mb in &centers[b] {
                        gap = gap.min(sq_dist(ma, mb).sqrt());
                    }
                }
            }
        }
        let all = train_raw.iter().chain(&test_raw);
        let total = train_raw.len() + test_raw.len();
        let correct = all
            .filter(|d| nearest_center_class(&d.features, &centers) == d.class)
            .count();
        let accuracy = if total == 0 { 1.0 } else { correct as f64 / total as f64 };
        let noise_bound = gap / (2.0 * BOUND_SIGMAS);
        Separability {
            min_center_gap: gap,
            noise_bound,
            nearest_center_accuracy: accuracy,
            separable: spec.noise < noise_bound && accuracy == 1.0,
        }
    };

    let (mut train, train_teacher) = build("tr", train_raw)?;
    let (mut test, test_teacher) = build("te", test_raw)?;
    train.attach_teacher(train_teacher)?;
    test.attach_teacher(test_teacher)?;
    Ok(SyntheticData {
        train,
        test,
        teacher,
        class_directions: dirs,
        mode_centers: centers,
        separability,
    })
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const TEACHER_FILE: &str = "teacher.jsonl";

/// Writes `train.jsonl`, `test.jsonl`, `teacher.jsonl` and `manifest.json`
/// into `out_dir` (created if needed).
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<(DatasetManifest, SyntheticData)> {
    let dir = out_dir.as_ref();
    let data = synthesize(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_flows(dir.join(TRAIN_FILE), &data.train.flows)?;
    write_flows(dir.join(TEST_FILE), &data.test.flows)?;
    write_teacher(dir.join(TEACHER_FILE), &data.teacher)?;
    let manifest = DatasetManifest {
        flows_path: PathBuf::from(TRAIN_FILE),
        test_flows_path: Some(PathBuf::from(TEST_FILE)),
        teacher_path: Some(PathBuf::from(TEACHER_FILE)),
        num_classes: spec.num_classes,
        feature_dim: spec.feature_dim,
        embedding_dim: spec.embedding_dim,
        synth: Some(spec.clone()),
        separability: Some(data.separability),
    };
    manifest.save(dir)?;
    Ok((manifest, data))
}
