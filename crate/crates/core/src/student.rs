//! The five-layer fully connected student and its training drivers.
//!
//! Layout: three activated hidden layers, a linear embedding layer (the
//! trunk output `ĥ`, matched against the teacher embedding), and a linear
//! classifier head producing logits.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{
    cfe_loss, cluster_loss, distillation_loss, select_triplets, CentroidBank, LossBreakdown, LossWeights,
};
use crate::rng::Rng;
use crate::types::{stack_inputs, LabeledDataset};

pub const MODEL_FORMAT: &str = "netclus-student";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|x| x.max(0.0)),
            Activation::Tanh => z.mapv(f64::tanh),
        }
    }

    /// Multiplies `grad` by the derivative at pre-activation `z`.
    fn backprop(self, z: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(z).for_each(|g, &x| {
                if x <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => Zip::from(grad).and(z).for_each(|g, &x| {
                let t = x.tanh();
                *g *= 1.0 - t * t;
            }),
        }
    }
}

/// One affine layer, `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    layer_dims: [usize; 5],
    num_classes: usize,
    activation: Activation,
    layers: Vec<Dense>,
    pub provenance: Provenance,
}

/// Trunk and head outputs for a batch.
#[derive(Debug, Clone)]
pub struct StudentOutput {
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
}

struct ForwardCache {
    /// Inputs of each layer: x, a1, a2, a3, embeddings.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the three hidden layers.
    pre: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Dense>);

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.0
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

impl StudentModel {
    /// Fresh model with He (relu) or Glorot (tanh) initialization and zero biases.
    pub fn new(
        layer_dims: [usize; 5],
        num_classes: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if layer_dims.contains(&0) || num_classes == 0 {
            return Err(Error::Config(format!(
                "layer dims and class count must be positive: {layer_dims:?}, C = {num_classes}"
            )));
        }
        let mut shapes: Vec<(usize, usize)> = layer_dims.windows(2).map(|w| (w[0], w[1])).collect();
        shapes.push((layer_dims[4], num_classes));
        let layers = shapes
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let mut l = Dense::zeros(fan_in, fan_out);
                let scale = match activation {
                    Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                    Activation::Tanh => (2.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                l.weight.mapv_inplace(|_| rng.normal() * scale);
                l
            })
            .collect();
        Ok(Self {
            layer_dims,
            num_classes,
            activation,
            layers,
            provenance: Provenance {
                seed: rng.seed(),
                config_digest: String::new(),
            },
        })
    }

    /// All weights and biases zero.
    pub fn zeros(layer_dims: [usize; 5], num_classes: usize, activation: Activation) -> Self {
        let mut shapes: Vec<(usize, usize)> = layer_dims.windows(2).map(|w| (w[0], w[1])).collect();
        shapes.push((layer_dims[4], num_classes));
        Self {
            layer_dims,
            num_classes,
            activation,
            layers: shapes.into_iter().map(|(i, o)| Dense::zeros(i, o)).collect(),
            provenance: Provenance {
                seed: 0,
                config_digest: String::new(),
            },
        }
    }

    pub fn layer_dims(&self) -> [usize; 5] {
        self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.layer_dims[4]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dims("flat parameters", self.num_params(), params.len()));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|w| *w = it.next().unwrap());
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims("student input features", self.input_dim(), x.ncols()));
        }
        Ok(())
    }

    fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(5);
        let mut pre = Vec::with_capacity(3);
        inputs.push(x.to_owned());
        for layer in &self.layers[..3] {
            let z = layer.forward(&inputs.last().unwrap().view());
            inputs.push(self.activation.apply(&z));
            pre.push(z);
        }
        let emb = self.layers[3].forward(&inputs[3].view());
        let logits = self.layers[4].forward(&emb.view());
        inputs.push(emb);
        Ok(ForwardCache { inputs, pre, logits })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<StudentOutput> {
        let mut cache = self.forward_cached(x)?;
        Ok(StudentOutput {
            embeddings: cache.inputs.pop().unwrap(),
            logits: cache.logits,
        })
    }

    /// Backpropagates loss gradients taken at the embeddings and the logits.
    fn backward(&self, cache: &ForwardCache, grad_emb: &Array2<f64>, grad_logits: &Array2<f64>) -> Gradients {
        let mut grads: Vec<Dense> = Vec::with_capacity(5);
        let head = &self.layers[4];
        grads.push(Dense {
            weight: grad_logits.t().dot(&cache.inputs[4]),
            bias: grad_logits.sum_axis(Axis(0)),
        });
        let mut g = grad_emb + &grad_logits.dot(&head.weight);
        for i in (0..4).rev() {
            if i < 3 {
                self.activation.backprop(&cache.pre[i], &mut g);
            }
            grads.push(Dense {
                weight: g.t().dot(&cache.inputs[i]),
                bias: g.sum_axis(Axis(0)),
            });
            if i > 0 {
                g = g.dot(&self.layers[i].weight);
            }
        }
        grads.reverse();
        Gradients(grads)
    }

    /// Value and parameter gradient of an objective defined on the batch
    /// outputs. `objective` returns `(value, ∂/∂embeddings, ∂/∂logits)`.
    pub fn value_and_grad(
        &self,
        x: ArrayView2<f64>,
        objective: impl FnOnce(&StudentOutput) -> Result<(f64, Array2<f64>, Array2<f64>)>,
    ) -> Result<(f64, Gradients)> {
        let mut cache = self.forward_cached(x)?;
        let out = StudentOutput {
            embeddings: cache.inputs.pop().unwrap(),
            logits: std::mem::take(&mut cache.logits),
        };
        let (value, ge, gl) = objective(&out)?;
        cache.inputs.push(out.embeddings);
        Ok((value, self.backward(&cache, &ge, &gl)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            layer_dims: self.layer_dims,
            num_classes: self.num_classes,
            activation: self.activation,
            provenance: self.provenance.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerBlob {
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: encode_f64(l.weight.iter().copied()),
                    bias: encode_f64(l.bias.iter().copied()),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::CorruptModel(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::CorruptModel(format!("unexpected format tag `{}`", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::ModelVersion {
                found: file.version,
                expected: MODEL_VERSION,
            });
        }
        let mut model = StudentModel::zeros(file.layer_dims, file.num_classes, file.activation);
        if file.layers.len() != model.layers.len() {
            return Err(Error::CorruptModel(format!("expected 5 layers, found {}", file.layers.len())));
        }
        for (l, blob) in model.layers.iter_mut().zip(&file.layers) {
            if (blob.rows, blob.cols) != l.weight.dim() {
                return Err(Error::CorruptModel(format!(
                    "layer shape {}x{} does not match declared dims",
                    blob.rows, blob.cols
                )));
            }
            let w = decode_f64(&blob.weight, l.weight.len())?;
            let b = decode_f64(&blob.bias, l.bias.len())?;
            l.weight = Array2::from_shape_vec(l.weight.dim(), w).expect("length checked");
            l.bias = Array1::from(b);
        }
        model.provenance = file.provenance;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerBlob {
    rows: usize,
    cols: usize,
    weight: String,
    bias: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    layer_dims: [usize; 5],
    num_classes: usize,
    activation: Activation,
    provenance: Provenance,
    layers: Vec<LayerBlob>,
}

fn encode_f64(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    B64.encode(bytes)
}

fn decode_f64(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = B64.decode(text).map_err(|e| Error::CorruptModel(e.to_string()))?;
    if bytes.len() != expected * 8 {
        return Err(Error::CorruptModel(format!(
            "weight blob holds {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossWeights,
    /// EMA momentum of the class centroids.
    pub centroid_momentum: f64,
    pub optimizer: OptimizerKind,
    pub hidden_dims: [usize; 3],
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            loss: LossWeights::default(),
            centroid_momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            hidden_dims: [256, 256, 256],
            activation: Activation::Relu,
        }
    }
}

impl TrainConfig {
    /// Defaults for distillation (20 epochs).
    pub fn distill() -> Self {
        Self {
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.centroid_momentum > 0.0 && self.centroid_momentum < 1.0) {
            return Err(Error::Config("centroid_momentum must lie in (0, 1)".into()));
        }
        self.loss.validate()
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// A freshly initialized model shaped for this config.
    pub fn init_model(&self, input_dim: usize, embedding_dim: usize, num_classes: usize) -> Result<StudentModel> {
        let [h1, h2, h3] = self.hidden_dims;
        let mut rng = Rng::new(self.seed).split(0x1417);
        let mut m = StudentModel::new([input_dim, h1, h2, h3, embedding_dim], num_classes, self.activation, &mut rng)?;
        m.provenance = Provenance {
            seed: self.seed,
            config_digest: self.digest(),
        };
        Ok(m)
    }
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, lr: f64, model: &StudentModel) -> Self {
        let zeros = || {
            model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect()
        };
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn apply(&mut self, model: &mut StudentModel, grads: &Gradients) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (l, g) in model.layers.iter_mut().zip(&grads.0) {
                    l.weight.scaled_add(-self.lr, &g.weight);
                    l.bias.scaled_add(-self.lr, &g.bias);
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - Self::BETA1.powi(self.step);
                let c2 = 1.0 - Self::BETA2.powi(self.step);
                let lr = self.lr;
                let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                };
                for (((l, g), m), v) in model.layers.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
                    Zip::from(&mut l.weight)
                        .and(&mut m.weight)
                        .and(&mut v.weight)
                        .and(&g.weight)
                        .for_each(|w, m, v, &g| update(w, m, v, g));
                    Zip::from(&mut l.bias)
                        .and(&mut m.bias)
                        .and(&mut v.bias)
                        .and(&g.bias)
                        .for_each(|w, m, v, &g| update(w, m, v, g));
                }
            }
        }
    }
}

/// Matrices a training run consumes.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub ids: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub teacher_embeddings: Option<Array2<f64>>,
    pub teacher_probs: Option<Array2<f64>>,
    pub num_classes: usize,
}

impl TrainingData {
    /// Labeled data for CFE training; every flow must carry a label.
    pub fn labeled(ds: &LabeledDataset) -> Result<Self> {
        Ok(Self {
            ids: ds.flows.iter().map(|f| f.id.clone()).collect(),
            features: ds.feature_matrix()?,
            labels: Some(ds.require_labels()?),
            teacher_embeddings: None,
            teacher_probs: None,
            num_classes: ds.num_classes,
        })
    }

    /// Teacher-supervised data; labels are kept when every flow has one.
    pub fn with_teacher(ds: &LabeledDataset) -> Result<Self> {
        let teacher = ds.teacher.as_ref().ok_or(Error::Empty("teacher outputs"))?;
        let mut emb = Vec::new();
        let mut probs = Vec::new();
        let (mut d, mut c) = (None, None);
        for f in &ds.flows {
            let t = teacher.get(&f.id).ok_or_else(|| Error::MissingTeacher(f.id.clone()))?;
            let d0 = *d.get_or_insert(t.embedding.len());
            let c0 = *c.get_or_insert(t.probs.len());
            if t.embedding.len() != d0 {
                return Err(Error::dims("teacher embedding", d0, t.embedding.len()));
            }
            if t.probs.len() != c0 {
                return Err(Error::dims("teacher probs", c0, t.probs.len()));
            }
            emb.extend_from_slice(&t.embedding);
            probs.extend_from_slice(&t.probs);
        }
        let n = ds.flows.len();
        let (d, c) = (d.ok_or(Error::Empty("dataset"))?, c.unwrap());
        let labels = ds.flows.iter().map(|f| f.label).collect::<Option<Vec<_>>>();
        Ok(Self {
            ids: ds.flows.iter().map(|f| f.id.clone()).collect(),
            features: stack_inputs(ds.flows.iter())?,
            labels,
            teacher_embeddings: Some(Array2::from_shape_vec((n, d), emb).unwrap()),
            teacher_probs: Some(Array2::from_shape_vec((n, c), probs).unwrap()),
            num_classes: ds.num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Batches in which a probability was clamped.
    pub clamped_batches: usize,
}

pub type LossTrace = Vec<EpochRecord>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Cfe,
    Distill,
}

/// Batches of shuffled indices; a trailing singleton joins the previous batch.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

fn train(
    mut model: StudentModel,
    data: &TrainingData,
    config: &TrainConfig,
    mode: Mode,
) -> Result<(StudentModel, LossTrace)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if data.features.ncols() != model.input_dim() {
        return Err(Error::dims("training features", model.input_dim(), data.features.ncols()));
    }
    if data.num_classes != model.num_classes() {
        return Err(Error::dims("class count", model.num_classes(), data.num_classes));
    }
    let use_cluster = config.loss.lambda != 0.0;
    let labels = match (mode, use_cluster, &data.labels) {
        (_, _, Some(l)) => Some(l.as_slice()),
        (Mode::Cfe, _, None) | (Mode::Distill, true, None) => {
            return Err(Error::MissingLabel("<training set>".into()))
        }
        (Mode::Distill, false, None) => None,
    };
    let teacher = match mode {
        Mode::Distill => {
            let e = data.teacher_embeddings.as_ref().ok_or(Error::Empty("teacher embeddings"))?;
            let p = data.teacher_probs.as_ref().ok_or(Error::Empty("teacher probs"))?;
            if e.ncols() != model.embedding_dim() {
                return Err(Error::dims("teacher embedding", model.embedding_dim(), e.ncols()));
            }
            Some((e, p))
        }
        Mode::Cfe => None,
    };

    let root = Rng::new(config.seed);
    let mut shuffle_rng = root.split(1);
    let mut triplet_rng = root.split(2);
    let mut bank = CentroidBank::new(model.num_classes(), model.embedding_dim(), config.centroid_momentum)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &model);
    let mut trace = Vec::with_capacity(config.epochs);
    let n = data.len();

    for epoch in 0..config.epochs {
        let mut epoch_loss = LossBreakdown::default();
        let mut clamped_batches = 0;
        for batch in epoch_batches(n, config.batch_size, &mut shuffle_rng) {
            let x = data.features.select(Axis(0), &batch);
            let y: Option<Vec<usize>> = labels.map(|l| batch.iter().map(|&i| l[i]).collect());
            let mut breakdown = LossBreakdown::default();
            let mut clamped = false;
            let mut batch_embeddings = None;
            let (_, grads) = model.value_and_grad(x.view(), |out| {
                let emb = out.embeddings.view();
                if use_cluster {
                    bank.initialize_missing(emb, y.as_deref().unwrap())?;
                }
                let triplets = if use_cluster {
                    select_triplets(y.as_deref().unwrap(), config.loss.triplet_policy, &mut triplet_rng)
                } else {
                    Vec::new()
                };
                let obj = match mode {
                    Mode::Cfe => cfe_loss(out.logits.view(), emb, y.as_deref().unwrap(), &bank, &triplets, &config.loss)?,
                    Mode::Distill => {
                        let (te, tp) = teacher.unwrap();
                        let te_b = te.select(Axis(0), &batch);
                        let tp_b = tp.select(Axis(0), &batch);
                        let mut obj = distillation_loss(emb, te_b.view(), out.logits.view(), tp_b.view())?;
                        if use_cluster {
                            let w = &config.loss;
                            let cl = cluster_loss(emb, y.as_deref().unwrap(), &bank, &triplets, w)?;
                            obj.breakdown.center = cl.center;
                            obj.breakdown.triplet = cl.triplet;
                            obj.breakdown.total += w.lambda * cl.value;
                            obj.grad_embeddings.scaled_add(w.lambda, &cl.grad);
                        }
                        obj
                    }
                };
                breakdown = obj.breakdown;
                clamped = obj.clamped;
                batch_embeddings = Some(out.embeddings.clone());
                Ok((obj.breakdown.total, obj.grad_embeddings, obj.grad_logits))
            })?;
            if !breakdown.is_finite() {
                return Err(Error::Diverged { epoch, what: "loss" });
            }
            opt.apply(&mut model, &grads);
            if use_cluster {
                bank.update(batch_embeddings.unwrap().view(), y.as_deref().unwrap())?;
            }
            clamped_batches += usize::from(clamped);
            epoch_loss.accumulate(&breakdown, batch.len() as f64 / n as f64);
        }
        if model.layers.iter().any(|l| l.weight.iter().any(|w| !w.is_finite())) {
            return Err(Error::Diverged { epoch, what: "weights" });
        }
        trace.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            clamped_batches,
        });
    }
    model.provenance = Provenance {
        seed: config.seed,
        config_digest: config.digest(),
    };
    Ok((model, trace))
}

/// Trains on classification plus `lambda`-weighted cluster loss.
pub fn train_cfe(model: StudentModel, data: &TrainingData, config: &TrainConfig) -> Result<(StudentModel, LossTrace)> {
    train(model, data, config, Mode::Cfe)
}

/// Trains against recorded teacher outputs (embedding MSE and KL) plus the
/// `lambda`-weighted cluster loss on the labels.
pub fn train_distill(
    model: StudentModel,
    data: &TrainingData,
    config: &TrainConfig,
) -> Result<(StudentModel, LossTrace)> {
    train(model, data, config, Mode::Distill)
}
