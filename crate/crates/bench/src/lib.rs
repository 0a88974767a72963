//! Shared fixtures for the criterion benches: the reference synthetic
//! workload and a student trained on it.

use ndarray::Array2;
use netclus::datagen::{synthesize, SynthSpec, SyntheticData};
use netclus::pipeline::batch_embed;
use netclus::student::{train_cfe, TrainingData};
use netclus::{FlowRecord, StudentModel, TrainConfig};

pub struct Workload {
    pub spec: SynthSpec,
    pub data: SyntheticData,
    pub model: StudentModel,
}

impl Workload {
    /// Reference spec with at least `test_flows` test flows.
    pub fn reference(test_flows: usize) -> Self {
        let mut spec = SynthSpec::reference();
        spec.test_flows_per_class = spec.test_flows_per_class.max(test_flows.div_ceil(spec.num_classes));
        let data = synthesize(&spec).expect("reference spec is valid");
        let config = TrainConfig {
            seed: spec.seed,
            ..TrainConfig::default()
        };
        let init = config
            .init_model(spec.feature_dim, spec.embedding_dim, spec.num_classes)
            .expect("valid dims");
        let train = TrainingData::labeled(&data.train).expect("labeled");
        let (model, _) = train_cfe(init, &train, &config).expect("training converges");
        Self { spec, data, model }
    }

    pub fn test_flows(&self, n: usize) -> &[FlowRecord] {
        &self.data.test.flows[..n]
    }

    /// Student embeddings of the first `n` test flows.
    pub fn embeddings(&self, n: usize) -> Array2<f64> {
        let refs: Vec<&FlowRecord> = self.test_flows(n).iter().collect();
        batch_embed(&self.model, &refs, 1024).expect("embed").embeddings
    }
}
