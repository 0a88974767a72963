//! Hybrid inference: embed, cluster (with labeled anchors), pseudo-label,
//! ASI-route each flow to the fast path or the teacher, and surface novel
//! clusters.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asi::{flag_novel, route, AsiValue, ClusterIndex, Discriminant, Route, SampleAsi};
use crate::cluster::{assign_pseudo_labels, cluster, Clustering, MergeParams};
use crate::error::{Error, Result};
use crate::math::argmax;
use crate::rng::{hash_str, splitmix64};
use crate::student::{StudentModel, StudentOutput};
use crate::types::{stack_inputs, FlowRecord, TeacherMap};

/// Per-flow oracle answer; a failure carries its message.
pub type OracleAnswer = std::result::Result<usize, String>;

/// Anything that can label flows in place of the teacher model.
pub trait Oracle: Sync {
    /// One answer per flow, in order.
    fn classify(&self, flows: &[&FlowRecord]) -> Vec<OracleAnswer>;
}

/// Oracle settings as they appear in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleConfig {
    /// Argmax of recorded teacher probabilities. Without a path the dataset's
    /// teacher file is used.
    Recorded {
        #[serde(default)]
        teacher: Option<std::path::PathBuf>,
    },
    /// External process, one invocation per batch. It reads JSON lines
    /// `{"id", "features"}` on stdin and answers `{"id", "label"}` per line.
    Command {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
    /// Ground truth with seeded label flips and a fixed per-flow latency.
    Simulated(SimulatedOracle),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatedOracle {
    /// Seconds slept per classified flow.
    pub latency_per_flow: f64,
    pub flip_rate: f64,
    /// Fraction of flows answered with an error.
    pub failure_rate: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SimulatedOracle {
    fn default() -> Self {
        Self {
            latency_per_flow: 0.0,
            flip_rate: 0.0,
            failure_rate: 0.0,
            num_classes: 2,
            seed: 0,
        }
    }
}

impl SimulatedOracle {
    pub fn perfect(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    fn answer(&self, flow: &FlowRecord) -> OracleAnswer {
        let label = flow.label.ok_or_else(|| format!("flow `{}` has no label", flow.id))?;
        let h = splitmix64(hash_str(&flow.id) ^ self.seed);
        let u = |x: u64| (x >> 11) as f64 / (1u64 << 53) as f64;
        if u(h) < self.failure_rate {
            return Err(format!("simulated failure for `{}`", flow.id));
        }
        let h2 = splitmix64(h);
        if self.num_classes > 1 && u(h2) < self.flip_rate {
            let shift = 1 + (splitmix64(h2) % (self.num_classes as u64 - 1)) as usize;
            return Ok((label + shift) % self.num_classes);
        }
        Ok(label)
    }
}

/// A configured teacher stand-in.
#[derive(Debug, Clone)]
pub enum TeacherOracle {
    Recorded(TeacherMap),
    Command { program: String, args: Vec<String> },
    Simulated(SimulatedOracle),
}

impl TeacherOracle {
    /// Resolves a config; `default_teacher` backs a recorded oracle without a path.
    pub fn from_config(
        config: &OracleConfig,
        load_teacher: impl FnOnce(Option<&Path>) -> Result<TeacherMap>,
    ) -> Result<Self> {
        match config {
            OracleConfig::Recorded { teacher } => Ok(Self::Recorded(load_teacher(teacher.as_deref())?)),
            OracleConfig::Command { program, args } => Ok(Self::Command {
                program: program.clone(),
                args: args.clone(),
            }),
            OracleConfig::Simulated(s) => {
                for (name, v) in [("flip_rate", s.flip_rate), ("failure_rate", s.failure_rate)] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
                    }
                }
                if !(s.latency_per_flow.is_finite() && s.latency_per_flow >= 0.0) {
                    return Err(Error::Config("latency_per_flow must be finite and >= 0".into()));
                }
                Ok(Self::Simulated(*s))
            }
        }
    }

    fn run_command(program: &str, args: &[String], flows: &[&FlowRecord]) -> Result<Vec<OracleAnswer>> {
        #[derive(Serialize)]
        struct Request<'a> {
            id: &'a str,
            features: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct Response {
            id: String,
            label: usize,
        }
        let mut input = Vec::new();
        for f in flows {
            serde_json::to_writer(
                &mut input,
                &Request {
                    id: &f.id,
                    features: f.input_vector()?,
                },
            )?;
            input.push(b'\n');
        }
        let oracle_err = |m: String| Error::Oracle(format!("`{program}`: {m}"));
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| oracle_err(e.to_string()))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(&input));
        let stdout = child.stdout.take().expect("piped stdout");
        let mut answers = Vec::with_capacity(flows.len());
        for (i, line) in BufReader::new(stdout).lines().enumerate() {
            let line = line.map_err(|e| oracle_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Response = serde_json::from_str(&line).map_err(|e| oracle_err(format!("line {}: {e}", i + 1)))?;
            answers.push(r);
        }
        let status = child.wait().map_err(|e| oracle_err(e.to_string()))?;
        writer
            .join()
            .map_err(|_| oracle_err("stdin writer panicked".into()))?
            .map_err(|e| oracle_err(e.to_string()))?;
        if !status.success() {
            return Err(oracle_err(format!("exited with {status}")));
        }
        if answers.len() != flows.len() {
            return Err(oracle_err(format!("expected {} answers, got {}", flows.len(), answers.len())));
        }
        Ok(flows
            .iter()
            .zip(answers)
            .map(|(f, a)| {
                if a.id == f.id {
                    Ok(a.label)
                } else {
                    Err(format!("answer for `{}` arrived where `{}` was expected", a.id, f.id))
                }
            })
            .collect())
    }
}

impl Oracle for TeacherOracle {
    fn classify(&self, flows: &[&FlowRecord]) -> Vec<OracleAnswer> {
        match self {
            Self::Recorded(map) => flows
                .iter()
                .map(|f| {
                    map.get(&f.id)
                        .map(|t| t.predicted_class())
                        .ok_or_else(|| Error::MissingTeacher(f.id.clone()).to_string())
                })
                .collect(),
            Self::Command { program, args } => match Self::run_command(program, args, flows) {
                Ok(a) => a,
                Err(e) => vec![Err(e.to_string()); flows.len()],
            },
            Self::Simulated(s) => {
                if s.latency_per_flow > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(s.latency_per_flow * flows.len() as f64));
                }
                flows.iter().map(|f| s.answer(f)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    FastPath { label: usize },
    Fallback { label: usize },
    /// Member of a cluster flagged novel; the record's `cluster_id` names it.
    NovelCandidate,
    Errored { message: String },
}

impl Decision {
    /// The class assigned to the flow, if any.
    pub fn label(&self) -> Option<usize> {
        match self {
            Self::FastPath { label } | Self::Fallback { label } => Some(*label),
            _ => None,
        }
    }

    pub fn is_fast_path(&self) -> bool {
        matches!(self, Self::FastPath { .. })
    }

    pub fn is_novel(&self) -> bool {
        matches!(self, Self::NovelCandidate)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTiming {
    /// This flow's share of the embedding stage, in seconds.
    pub student: f64,
    /// This flow's share of its oracle batch, in seconds.
    pub oracle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub flow_id: String,
    #[serde(flatten)]
    pub decision: Decision,
    pub ratio: f64,
    pub strength: f64,
    /// Cluster the flow was merged into.
    pub cluster_id: usize,
    /// Cluster nearest to the flow's embedding.
    pub nearest_cluster_id: usize,
    pub timing: FlowTiming,
}

impl RoutingDecision {
    pub fn asi(&self) -> AsiValue {
        AsiValue {
            ratio: self.ratio,
            strength: self.strength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub batch_size: usize,
    pub oracle_batch_size: usize,
    /// Labeled training flows per class added to the clustering.
    pub anchors_per_class: usize,
    pub merge: MergeParams,
    pub discriminant: Discriminant,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            oracle_batch_size: 256,
            anchors_per_class: 50,
            merge: MergeParams::default(),
            discriminant: Discriminant::default(),
        }
    }
}

impl InferConfig {
    pub fn for_classes(num_classes: usize) -> Self {
        Self {
            merge: MergeParams::for_classes(num_classes),
            ..Self::default()
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.batch_size == 0 || self.oracle_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        self.merge.validate(num_classes)?;
        self.discriminant.validate()
    }
}

/// Student forward over `flows` in batches of `batch_size`; rows follow input order.
pub fn batch_embed(model: &StudentModel, flows: &[&FlowRecord], batch_size: usize) -> Result<StudentOutput> {
    if flows.is_empty() {
        return Err(Error::Empty("flows"));
    }
    let batch_size = batch_size.max(1);
    let parts: Vec<StudentOutput> = flows
        .par_chunks(batch_size)
        .map(|chunk| {
            let x = stack_inputs(chunk.iter().copied())?;
            model.forward(x.view())
        })
        .collect::<Result<_>>()?;
    let join = |pick: fn(&StudentOutput) -> &Array2<f64>| -> Array2<f64> {
        let views: Vec<_> = parts.iter().map(|p| pick(p).view()).collect();
        concatenate(Axis(0), &views).expect("batches share column counts")
    };
    Ok(StudentOutput {
        embeddings: join(|p| &p.embeddings),
        logits: join(|p| &p.logits),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepareTiming {
    pub embed: f64,
    pub cluster: f64,
    pub asi: f64,
}

/// Everything routing needs that does not depend on the discriminant.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Inference flows come first, anchors after.
    pub num_flows: usize,
    pub num_anchors: usize,
    pub output: StudentOutput,
    pub clustering: Clustering,
    pub index: ClusterIndex,
    /// Cluster position of every row.
    pub membership: Vec<usize>,
    pub samples: Vec<SampleAsi>,
    /// Mean member strength per cluster position.
    pub cluster_strength: Vec<f64>,
    /// Ratio at each cluster centroid.
    pub cluster_ratio: Vec<f64>,
    pub timing: PrepareTiming,
}

impl Prepared {
    pub fn cluster_asi(&self, pos: usize) -> AsiValue {
        AsiValue {
            ratio: self.cluster_ratio[pos],
            strength: self.cluster_strength[pos],
        }
    }

    /// Student seconds per row.
    pub fn student_latency(&self) -> f64 {
        self.timing.embed / (self.num_flows + self.num_anchors) as f64
    }
}

/// Embeds flows plus anchors, clusters them, pseudo-labels the clusters from
/// student predictions and measures ASI for every row.
pub fn prepare(
    model: &StudentModel,
    flows: &[FlowRecord],
    anchors: &[&FlowRecord],
    config: &InferConfig,
) -> Result<Prepared> {
    if flows.is_empty() {
        return Err(Error::Empty("flows"));
    }
    config.validate(model.num_classes())?;
    let rows: Vec<&FlowRecord> = flows.iter().chain(anchors.iter().copied()).collect();

    let start = Instant::now();
    let output = batch_embed(model, &rows, config.batch_size)?;
    let embed = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut clustering = cluster(output.embeddings.view(), &config.merge)?;
    assign_pseudo_labels(&mut clustering.clusters, output.logits.view())?;
    let cluster_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let k = config.discriminant.k;
    let index = ClusterIndex::new(&clustering.clusters)?;
    let samples = index.evaluate(output.embeddings.view(), k)?;
    let membership = clustering.assignment(rows.len());
    let cluster_strength: Vec<f64> = clustering
        .clusters
        .iter()
        .map(|c| c.members.iter().map(|&m| samples[m].value.strength).sum::<f64>() / c.size() as f64)
        .collect();
    let cluster_ratio = (0..clustering.clusters.len())
        .into_par_iter()
        .map(|pos| index.centroid_ratio(pos, k))
        .collect::<Result<Vec<f64>>>()?;
    let asi = start.elapsed().as_secs_f64();

    Ok(Prepared {
        num_flows: flows.len(),
        num_anchors: anchors.len(),
        output,
        clustering,
        index,
        membership,
        samples,
        cluster_strength,
        cluster_ratio,
        timing: PrepareTiming {
            embed,
            cluster: cluster_secs,
            asi,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelCluster {
    pub cluster_id: usize,
    pub size: usize,
    /// Flows (not anchors) in the cluster.
    pub flows: usize,
    pub ratio: f64,
    pub strength: f64,
    pub pseudo_label: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InferTiming {
    pub embed: f64,
    pub cluster: f64,
    pub asi: f64,
    pub route: f64,
    pub oracle: f64,
    /// Sum of the stages above.
    pub hybrid: f64,
    pub student_per_flow: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub all_fallback: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub flows: usize,
    pub anchors: usize,
    pub clusters: usize,
    pub fast_path: usize,
    pub fallback: usize,
    pub novel_candidate: usize,
    pub errored: usize,
    pub fast_path_fraction: f64,
    pub fallback_fraction: f64,
    pub novel_fraction: f64,
    /// Flows whose ASI saw fewer than `k` clusters.
    pub partial_asi: usize,
    pub novel_clusters: Vec<NovelCluster>,
    pub timing: InferTiming,
}

#[derive(Debug, Clone)]
pub struct InferOutcome {
    pub decisions: Vec<RoutingDecision>,
    pub summary: InferSummary,
}

/// Clusters flagged novel under `discriminant`, by position.
pub fn novel_clusters(prepared: &Prepared, discriminant: &Discriminant) -> Vec<bool> {
    (0..prepared.clustering.clusters.len())
        .map(|p| flag_novel(prepared.cluster_asi(p), discriminant))
        .collect()
}

/// Routes every inference flow under `discriminant`, consulting `oracle` for
/// fallback flows. Flows in novel clusters skip the oracle.
pub fn route_flows(
    prepared: &Prepared,
    flows: &[FlowRecord],
    oracle: &dyn Oracle,
    discriminant: &Discriminant,
    oracle_batch_size: usize,
) -> Result<InferOutcome> {
    if flows.len() != prepared.num_flows {
        return Err(Error::dims("routed flows", prepared.num_flows, flows.len()));
    }
    discriminant.validate()?;
    let start = Instant::now();
    let novel = novel_clusters(prepared, discriminant);
    let clusters = &prepared.clustering.clusters;
    let student = prepared.student_latency();

    let mut decisions: Vec<RoutingDecision> = Vec::with_capacity(flows.len());
    let mut pending = Vec::new();
    for (i, f) in flows.iter().enumerate() {
        let s = &prepared.samples[i];
        let pos = prepared.membership[i];
        let decision = if novel[pos] {
            Decision::NovelCandidate
        } else if route(s.value, discriminant) == Route::FastPath {
            let label = prepared
                .index
                .label(s.nearest)
                .unwrap_or_else(|| argmax(prepared.output.logits.row(i).as_slice().unwrap_or(&[])));
            Decision::FastPath { label }
        } else {
            pending.push(i);
            Decision::Errored {
                message: "not yet answered".into(),
            }
        };
        decisions.push(RoutingDecision {
            flow_id: f.id.clone(),
            decision,
            ratio: s.value.ratio,
            strength: s.value.strength,
            cluster_id: clusters[pos].id,
            nearest_cluster_id: clusters[s.nearest].id,
            timing: FlowTiming { student, oracle: 0.0 },
        });
    }
    let route_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    for chunk in pending.chunks(oracle_batch_size.max(1)) {
        let batch: Vec<&FlowRecord> = chunk.iter().map(|&i| &flows[i]).collect();
        let t = Instant::now();
        let answers = oracle.classify(&batch);
        let share = t.elapsed().as_secs_f64() / chunk.len() as f64;
        if answers.len() != chunk.len() {
            return Err(Error::Oracle(format!(
                "expected {} answers, got {}",
                chunk.len(),
                answers.len()
            )));
        }
        for (&i, a) in chunk.iter().zip(answers) {
            decisions[i].decision = match a {
                Ok(label) => Decision::Fallback { label },
                Err(message) => Decision::Errored { message },
            };
            decisions[i].timing.oracle = share;
        }
    }
    let oracle_secs = start.elapsed().as_secs_f64();

    let count = |p: fn(&Decision) -> bool| decisions.iter().filter(|d| p(&d.decision)).count();
    let fast_path = count(|d| matches!(d, Decision::FastPath { .. }));
    let fallback = count(|d| matches!(d, Decision::Fallback { .. }));
    let novel_candidate = count(|d| matches!(d, Decision::NovelCandidate));
    let errored = count(|d| matches!(d, Decision::Errored { .. }));
    let n = flows.len() as f64;
    let novel_list = novel
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(p, _)| {
            let c = &clusters[p];
            let v = prepared.cluster_asi(p);
            NovelCluster {
                cluster_id: c.id,
                size: c.size(),
                flows: c.members.iter().filter(|&&m| m < prepared.num_flows).count(),
                ratio: v.ratio,
                strength: v.strength,
                pseudo_label: c.pseudo_label,
            }
        })
        .collect();
    let pt = prepared.timing;
    let timing = InferTiming {
        embed: pt.embed,
        cluster: pt.cluster,
        asi: pt.asi,
        route: route_secs,
        oracle: oracle_secs,
        hybrid: pt.embed + pt.cluster + pt.asi + route_secs + oracle_secs,
        student_per_flow: student,
        all_fallback: None,
        speedup: None,
    };
    Ok(InferOutcome {
        summary: InferSummary {
            flows: flows.len(),
            anchors: prepared.num_anchors,
            clusters: clusters.len(),
            fast_path,
            fallback,
            novel_candidate,
            errored,
            fast_path_fraction: fast_path as f64 / n,
            fallback_fraction: fallback as f64 / n,
            novel_fraction: novel_candidate as f64 / n,
            partial_asi: prepared.samples[..flows.len()].iter().filter(|s| s.partial).count(),
            novel_clusters: novel_list,
            timing,
        },
        decisions,
    })
}

/// Labels every flow with the oracle alone. Returns the answers and the
/// wall-clock seconds spent.
pub fn all_fallback(flows: &[FlowRecord], oracle: &dyn Oracle, batch_size: usize) -> (Vec<OracleAnswer>, f64) {
    let start = Instant::now();
    let refs: Vec<&FlowRecord> = flows.iter().collect();
    let mut out = Vec::with_capacity(flows.len());
    for chunk in refs.chunks(batch_size.max(1)) {
        out.extend(oracle.classify(chunk));
    }
    (out, start.elapsed().as_secs_f64())
}

/// End-to-end hybrid inference.
pub fn infer(
    model: &StudentModel,
    flows: &[FlowRecord],
    anchors: &[&FlowRecord],
    oracle: &dyn Oracle,
    config: &InferConfig,
) -> Result<InferOutcome> {
    let prepared = prepare(model, flows, anchors, config)?;
    route_flows(&prepared, flows, oracle, &config.discriminant, config.oracle_batch_size)
}

/// Adds the all-fallback wall-clock and the resulting speedup to a summary.
pub fn record_speedup(summary: &mut InferSummary, all_fallback_secs: f64) {
    summary.timing.all_fallback = Some(all_fallback_secs);
    summary.timing.speedup = (summary.timing.hybrid > 0.0).then(|| all_fallback_secs / summary.timing.hybrid);
}

/// Writes one JSON object per decision.
pub fn write_decisions(path: impl AsRef<Path>, decisions: &[RoutingDecision]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for d in decisions {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_decisions(path: impl AsRef<Path>) -> Result<Vec<RoutingDecision>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synthesize, SynthSpec};
    use crate::student::{train_cfe, TrainConfig, TrainingData};
    use std::sync::OnceLock;

    fn spec() -> SynthSpec {
        SynthSpec {
            num_classes: 3,
            flows_per_class: 200,
            test_flows_per_class: 200,
            feature_dim: 16,
            embedding_dim: 8,
            noise: 0.02,
            modes_per_class: 10,
            mode_spread: 0.5,
            seed: 11,
            ..SynthSpec::default()
        }
    }

    struct Fixture {
        model: StudentModel,
        data: crate::datagen::SyntheticData,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let data = synthesize(&spec()).unwrap();
            let config = TrainConfig {
                epochs: 10,
                hidden_dims: [64, 64, 64],
                seed: 3,
                ..TrainConfig::default()
            };
            let model = config.init_model(16, 8, 3).unwrap();
            let (model, _) = train_cfe(model, &TrainingData::labeled(&data.train).unwrap(), &config).unwrap();
            Fixture { model, data }
        })
    }

    fn config() -> InferConfig {
        InferConfig {
            anchors_per_class: 20,
            ..InferConfig::for_classes(3)
        }
    }

    fn run(delta: (f64, f64)) -> InferOutcome {
        let f = fixture();
        let mut cfg = config();
        cfg.discriminant.gamma = delta.0;
        cfg.discriminant.eta = delta.1;
        let anchors = f.data.train.anchors(cfg.anchors_per_class);
        let oracle = TeacherOracle::Simulated(SimulatedOracle::perfect(3));
        infer(&f.model, &f.data.test.flows, &anchors, &oracle, &cfg).unwrap()
    }

    fn conserved(o: &InferOutcome) {
        let s = &o.summary;
        assert_eq!(o.decisions.len(), s.flows);
        assert_eq!(s.fast_path + s.fallback + s.novel_candidate + s.errored, s.flows);
    }

    #[test]
    fn limiting_thresholds() {
        let all = run((0.0, 0.0));
        conserved(&all);
        assert!(all.summary.fallback_fraction < 0.05, "{:?}", all.summary);
        let none = run((1.0, 1.0));
        conserved(&none);
        assert_eq!(none.summary.fast_path, 0);
    }

    #[test]
    fn separated_default_delta() {
        let o = run((0.5, 0.5));
        conserved(&o);
        let f = fixture();
        assert!(o.summary.fast_path_fraction >= 0.8, "{:?}", o.summary);
        for (d, flow) in o.decisions.iter().zip(&f.data.test.flows) {
            assert_eq!(d.flow_id, flow.id);
            if let Decision::FastPath { label } = d.decision {
                assert_eq!(Some(label), flow.label);
            }
        }
    }

    #[test]
    fn routing_is_monotone_in_gamma() {
        let f = fixture();
        let cfg = config();
        let anchors = f.data.train.anchors(cfg.anchors_per_class);
        let p = prepare(&f.model, &f.data.test.flows, &anchors, &cfg).unwrap();
        let oracle = TeacherOracle::Simulated(SimulatedOracle::perfect(3));
        let mut last = f64::INFINITY;
        for g in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let d = Discriminant::with_thresholds(g, 0.3);
            let o = route_flows(&p, &f.data.test.flows, &oracle, &d, 64).unwrap();
            assert!(o.summary.fast_path_fraction <= last);
            last = o.summary.fast_path_fraction;
        }
    }

    #[test]
    fn batch_embed_matches_single_forwards() {
        let f = fixture();
        let flows: Vec<&FlowRecord> = f.data.test.flows.iter().take(100).collect();
        let batched = batch_embed(&f.model, &flows, 7).unwrap();
        for (i, flow) in flows.iter().enumerate() {
            let x = stack_inputs(std::iter::once(*flow)).unwrap();
            let single = f.model.forward(x.view()).unwrap();
            assert_eq!(single.embeddings.row(0), batched.embeddings.row(i));
            assert_eq!(single.logits.row(0), batched.logits.row(i));
        }
        let one = batch_embed(&f.model, &flows[..1], 1).unwrap();
        assert_eq!(one.embeddings.row(0), batched.embeddings.row(0));
        let empty = FlowRecord {
            id: "x".into(),
            payload: None,
            features: None,
            label: None,
        };
        assert!(batch_embed(&f.model, &[&empty], 4).is_err());
    }

    #[test]
    fn oracle_failures_mark_errored() {
        let f = fixture();
        let cfg = InferConfig {
            discriminant: Discriminant::with_thresholds(1.0, 1.0),
            ..config()
        };
        let oracle = TeacherOracle::Simulated(SimulatedOracle {
            failure_rate: 0.5,
            ..SimulatedOracle::perfect(3)
        });
        let o = infer(&f.model, &f.data.test.flows, &[], &oracle, &cfg).unwrap();
        conserved(&o);
        assert!(o.summary.errored > 0 && o.summary.fallback > 0);
    }

    #[test]
    fn simulated_oracle_is_deterministic_and_noisy() {
        let s = SimulatedOracle {
            flip_rate: 0.3,
            ..SimulatedOracle::perfect(4)
        };
        let flows: Vec<FlowRecord> = (0..2000)
            .map(|i| FlowRecord::with_features(format!("f{i}"), vec![1.0], Some(i % 4)))
            .collect();
        let refs: Vec<&FlowRecord> = flows.iter().collect();
        let a = TeacherOracle::Simulated(s).classify(&refs);
        let b = TeacherOracle::Simulated(s).classify(&refs);
        assert_eq!(a, b);
        let wrong = a.iter().zip(&flows).filter(|(x, f)| x.as_ref().ok() != f.label.as_ref()).count();
        assert!((wrong as f64 / 2000.0 - 0.3).abs() < 0.04);
    }

    #[test]
    fn recorded_oracle_reports_missing_ids() {
        let f = fixture();
        let oracle = TeacherOracle::Recorded(f.data.test.teacher.clone().unwrap());
        let known = &f.data.test.flows[0];
        let stranger = FlowRecord::with_features("nope", vec![0.0; 16], None);
        let out = oracle.classify(&[known, &stranger]);
        assert_eq!(out[0], Ok(known.label.unwrap()));
        assert!(out[1].as_ref().unwrap_err().contains("nope"));
    }

    #[test]
    fn decisions_round_trip() {
        let o = run((0.5, 0.5));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_decisions(&p, &o.decisions).unwrap();
        assert_eq!(read_decisions(&p).unwrap(), o.decisions);

        let mut every = o.decisions[..4].to_vec();
        every[0].decision = Decision::Fallback { label: 2 };
        every[1].decision = Decision::NovelCandidate;
        every[2].decision = Decision::Errored { message: "timeout".into() };
        write_decisions(&p, &every).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().all(|l| l.matches("\"cluster_id\"").count() == 1));
        assert_eq!(read_decisions(&p).unwrap(), every);
    }
}
