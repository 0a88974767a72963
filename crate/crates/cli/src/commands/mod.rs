pub mod bench;
pub mod cluster;
pub mod eval;
pub mod gen;
pub mod infer;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::Context;
use netclus::ingest::{DatasetManifest, Split};
use netclus::{LabeledDataset, StudentModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

pub struct Data {
    pub manifest: DatasetManifest,
    pub base: PathBuf,
}

impl Data {
    pub fn open(dir: &Path) -> anyhow::Result<Self> {
        let (manifest, base) =
            DatasetManifest::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
        Ok(Self { manifest, base })
    }

    pub fn split(&self, split: impl Into<Split>) -> anyhow::Result<LabeledDataset> {
        let split = split.into();
        self.manifest
            .load_split(&self.base, split)
            .with_context(|| format!("loading {split:?} split from {}", self.base.display()))
    }

    pub fn holdout_classes(&self) -> Vec<usize> {
        self.manifest
            .synth
            .as_ref()
            .map(|s| s.holdout_classes.clone())
            .unwrap_or_default()
    }
}

pub fn load_model(path: &Path, data: &Data) -> anyhow::Result<StudentModel> {
    let model = StudentModel::load(path).with_context(|| format!("loading model {}", path.display()))?;
    let m = &data.manifest;
    if model.input_dim() != m.feature_dim || model.num_classes() != m.num_classes {
        return Err(crate::config::bad(format!(
            "model {} expects {} features and {} classes; dataset has {} and {}",
            path.display(),
            model.input_dim(),
            model.num_classes(),
            m.feature_dim,
            m.num_classes
        )));
    }
    Ok(model)
}
