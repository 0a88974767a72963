//! Domain records shared across the pipeline.

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ingest::{featurize_payload, FEATURE_DIM};
use crate::math::argmax;

/// One traffic flow as read from a flows file.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub id: String,
    pub payload: Option<Vec<u8>>,
    pub features: Option<Vec<f64>>,
    pub label: Option<usize>,
}

impl FlowRecord {
    pub fn with_features(id: impl Into<String>, features: Vec<f64>, label: Option<usize>) -> Self {
        Self {
            id: id.into(),
            payload: None,
            features: Some(features),
            label,
        }
    }

    /// Input vector for the student: explicit features when present, otherwise
    /// the featurized payload.
    pub fn input_vector(&self) -> Result<Vec<f64>> {
        match (&self.features, &self.payload) {
            (Some(f), _) => Ok(f.clone()),
            (None, Some(p)) => featurize_payload(p),
            (None, None) => Err(Error::EmptyFlow(self.id.clone())),
        }
    }

    /// Dimension of [`Self::input_vector`] without computing it.
    pub fn input_dim(&self) -> Option<usize> {
        match (&self.features, &self.payload) {
            (Some(f), _) => Some(f.len()),
            (None, Some(_)) => Some(FEATURE_DIM),
            (None, None) => None,
        }
    }
}

/// Recorded teacher outputs for one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub flow_id: String,
    pub embedding: Vec<f64>,
    pub probs: Vec<f64>,
}

impl TeacherOutput {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.probs)
    }
}

pub type TeacherMap = BTreeMap<String, TeacherOutput>;

#[derive(Debug, Clone, Default)]
pub struct LabeledDataset {
    pub flows: Vec<FlowRecord>,
    pub num_classes: usize,
    pub teacher: Option<TeacherMap>,
}

impl LabeledDataset {
    pub fn new(flows: Vec<FlowRecord>, num_classes: usize) -> Result<Self> {
        let ds = Self {
            flows,
            num_classes,
            teacher: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.flows.len());
        for f in &self.flows {
            if !seen.insert(f.id.as_str()) {
                return Err(Error::DuplicateId(f.id.clone()));
            }
            if f.payload.is_none() && f.features.is_none() {
                return Err(Error::EmptyFlow(f.id.clone()));
            }
            if let Some(l) = f.label {
                if l >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        num_classes: self.num_classes,
                    });
                }
            }
        }
        if let Some(t) = &self.teacher {
            for id in t.keys() {
                if !seen.contains(id.as_str()) {
                    return Err(Error::UnknownId(id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn attach_teacher(&mut self, teacher: TeacherMap) -> Result<()> {
        self.teacher = Some(teacher);
        self.validate()
    }

    /// Stacks every flow's input vector into an `n × d_in` matrix.
    pub fn feature_matrix(&self) -> Result<Array2<f64>> {
        stack_inputs(self.flows.iter())
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.flows.iter().map(|f| f.label).collect()
    }

    /// Labels for every flow, failing on the first unlabeled one.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.flows
            .iter()
            .map(|f| f.label.ok_or_else(|| Error::MissingLabel(f.id.clone())))
            .collect()
    }

    /// Keeps only the flows for which `keep` holds (teacher entries follow).
    pub fn filtered(&self, mut keep: impl FnMut(&FlowRecord) -> bool) -> LabeledDataset {
        let flows: Vec<FlowRecord> = self.flows.iter().filter(|f| keep(f)).cloned().collect();
        let teacher = self.teacher.as_ref().map(|t| {
            flows
                .iter()
                .filter_map(|f| t.get(&f.id).map(|o| (f.id.clone(), o.clone())))
                .collect()
        });
        LabeledDataset {
            flows,
            num_classes: self.num_classes,
            teacher,
        }
    }

    /// Drops labeled flows whose recorded teacher prediction disagrees with
    /// the ground truth (teacher-side label noise).
    pub fn without_teacher_disagreements(&self) -> LabeledDataset {
        let Some(t) = &self.teacher else {
            return self.clone();
        };
        self.filtered(|f| match (f.label, t.get(&f.id)) {
            (Some(l), Some(o)) => o.predicted_class() == l,
            _ => true,
        })
    }

    /// Up to `per_class` labeled flows of each class, in file order.
    pub fn anchors(&self, per_class: usize) -> Vec<&FlowRecord> {
        let mut counts = vec![0usize; self.num_classes];
        self.flows
            .iter()
            .filter(|f| match f.label {
                Some(l) if counts[l] < per_class => {
                    counts[l] += 1;
                    true
                }
                _ => false,
            })
            .collect()
    }
}

pub(crate) fn stack_inputs<'a>(flows: impl Iterator<Item = &'a FlowRecord>) -> Result<Array2<f64>> {
    let mut dim = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for f in flows {
        let v = f.input_vector()?;
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::dims(format!("features of flow `{}`", f.id), d, v.len()))
            }
            _ => {}
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flow features"));
        }
        data.extend(v);
        rows += 1;
    }
    let dim = dim.ok_or(Error::Empty("dataset"))?;
    Ok(Array2::from_shape_vec((rows, dim), data).expect("shape checked above"))
}
