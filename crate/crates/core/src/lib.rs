//! Clustering-accelerated encrypted traffic classification.
//!
//! A small fully connected student is trained (directly, or by distillation
//! from a recorded teacher) so that its embeddings cluster by traffic class.
//! At inference the embeddings are grouped by a size-constrained hierarchical
//! clusterer, each cluster takes a pseudo-label, and every flow is either
//! answered from its cluster (fast path) or sent to the teacher (fallback)
//! depending on its Affiliation Strength Index. Cohesive clusters that
//! disagree with their neighborhood are surfaced as candidate novel types.

pub mod asi;
pub mod cluster;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod losses;
pub mod math;
pub mod pipeline;
pub mod rng;
pub mod student;
pub mod types;

#[cfg(any(test, feature = "oracle"))]
pub mod oracle;

pub use asi::{AsiValue, Discriminant, Route};
pub use cluster::{Cluster, Clustering, MergeParams};
pub use datagen::SynthSpec;
pub use error::{Error, Result};
pub use ingest::DatasetManifest;
pub use losses::LossWeights;
pub use pipeline::{Decision, RoutingDecision, TeacherOracle};
pub use rng::Rng;
pub use student::{StudentModel, TrainConfig};
pub use types::{FlowRecord, LabeledDataset, TeacherOutput};
