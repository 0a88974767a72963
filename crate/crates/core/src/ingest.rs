//! Dataset files: JSON-lines flows, JSON-lines teacher outputs, the JSON
//! manifest tying them together, and the payload featurizer.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{Separability, SynthSpec};
use crate::error::{Error, Result};
use crate::types::{FlowRecord, LabeledDataset, TeacherMap, TeacherOutput};

/// Packets kept per flow.
pub const PACKETS: usize = 5;
/// Payload bytes kept per packet.
pub const PACKET_BYTES: usize = 128;
const HISTOGRAM_BINS: usize = 256;
const PREFIX_BYTES: usize = 64;
/// Output dimension of [`featurize`].
pub const FEATURE_DIM: usize = HISTOGRAM_BINS + PREFIX_BYTES;

const PROB_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub packets: usize,
    pub bytes_per_packet: usize,
}

impl Default for Truncation {
    fn default() -> Self {
        Self {
            packets: PACKETS,
            bytes_per_packet: PACKET_BYTES,
        }
    }
}

/// Maps packet payloads to a fixed 320-dim vector: an L1-normalized byte
/// histogram over the truncated window followed by the first 64 bytes of
/// the first packet scaled to `[0, 1]` (zero-padded when shorter).
pub fn featurize(packets: &[&[u8]], truncation: Truncation) -> Result<Vec<f64>> {
    let window: Vec<&[u8]> = packets
        .iter()
        .take(truncation.packets)
        .map(|p| &p[..p.len().min(truncation.bytes_per_packet)])
        .collect();
    let total: usize = window.iter().map(|p| p.len()).sum();
    if total == 0 {
        return Err(Error::EmptyPayload);
    }
    let mut out = vec![0.0; FEATURE_DIM];
    for b in window.iter().flat_map(|p| p.iter()) {
        out[*b as usize] += 1.0;
    }
    let inv = 1.0 / total as f64;
    out[..HISTOGRAM_BINS].iter_mut().for_each(|x| *x *= inv);
    for (slot, b) in out[HISTOGRAM_BINS..].iter_mut().zip(window[0].iter()) {
        *slot = f64::from(*b) / 255.0;
    }
    Ok(out)
}

/// [`featurize`] with the whole payload treated as a single packet.
pub fn featurize_payload(payload: &[u8]) -> Result<Vec<f64>> {
    featurize(&[payload], Truncation::default())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload_hex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TeacherLine {
    id: String,
    embedding: Vec<f64>,
    probs: Vec<f64>,
}

fn read_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(path, e))))
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty())))
}

fn parse_err(path: &Path, line: usize, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Reads a JSON-lines flows file, preserving line order.
pub fn load_flows(path: impl AsRef<Path>, num_classes: usize) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let mut flows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in read_lines(path)? {
        let line = line?;
        let rec: FlowLine = serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e))?;
        let payload = rec
            .payload_hex
            .map(|h| hex::decode(h.trim()))
            .transpose()
            .map_err(|e| parse_err(path, lineno, format!("payload_hex: {e}")))?;
        if payload.is_none() && rec.features.is_none() {
            return Err(parse_err(path, lineno, "flow has neither payload_hex nor features"));
        }
        if let Some(l) = rec.label {
            if l >= num_classes {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("label out of range: {l} (num_classes = {num_classes})"),
                ));
            }
        }
        if !seen.insert(rec.id.clone()) {
            return Err(parse_err(path, lineno, format!("duplicate id `{}`", rec.id)));
        }
        flows.push(FlowRecord {
            id: rec.id,
            payload,
            features: rec.features,
            label: rec.label,
        });
    }
    LabeledDataset::new(flows, num_classes)
}

pub fn write_flows(path: impl AsRef<Path>, flows: &[FlowRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in flows {
        let line = FlowLine {
            id: f.id.clone(),
            payload_hex: f.payload.as_ref().map(hex::encode),
            features: f.features.clone(),
            label: f.label,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Expected teacher dimensions; `None` fields are inferred from the first record.
#[derive(Debug, Clone, Copy, Default)]
pub struct TeacherDims {
    pub embedding_dim: Option<usize>,
    pub num_classes: Option<usize>,
}

pub fn load_teacher(path: impl AsRef<Path>, dims: TeacherDims) -> Result<TeacherMap> {
    let path = path.as_ref();
    let mut out = TeacherMap::new();
    let (mut d, mut c) = (dims.embedding_dim, dims.num_classes);
    for (lineno, line) in read_lines(path)? {
        let line = line?;
        let rec: TeacherLine = serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e))?;
        let d_exp = *d.get_or_insert(rec.embedding.len());
        let c_exp = *c.get_or_insert(rec.probs.len());
        if rec.embedding.len() != d_exp {
            return Err(parse_err(
                path,
                lineno,
                format!("embedding dimension mismatch: expected {d_exp}, got {}", rec.embedding.len()),
            ));
        }
        if rec.probs.len() != c_exp {
            return Err(parse_err(
                path,
                lineno,
                format!("probs dimension mismatch: expected {c_exp}, got {}", rec.probs.len()),
            ));
        }
        if rec.embedding.iter().chain(&rec.probs).any(|x| !x.is_finite()) {
            return Err(parse_err(path, lineno, "non-finite value"));
        }
        let sum: f64 = rec.probs.iter().sum();
        if rec.probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(parse_err(
                path,
                lineno,
                format!("probabilities for `{}` sum to {sum}, expected 1", rec.id),
            ));
        }
        if out.contains_key(&rec.id) {
            return Err(parse_err(path, lineno, format!("duplicate id `{}`", rec.id)));
        }
        out.insert(
            rec.id.clone(),
            TeacherOutput {
                flow_id: rec.id,
                embedding: rec.embedding,
                probs: rec.probs,
            },
        );
    }
    Ok(out)
}

/// Writes teacher records in the given order.
pub fn write_teacher<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a TeacherOutput>,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in records {
        let line = TeacherLine {
            id: t.flow_id.clone(),
            embedding: t.embedding.clone(),
            probs: t.probs.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Describes a dataset directory. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub flows_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_flows_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_path: Option<PathBuf>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separability: Option<Separability>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl DatasetManifest {
    /// Accepts either a manifest file or a directory containing `manifest.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| parse_err(&file, e.line(), e))?;
        let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let file = dir.as_ref().join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&file, text).map_err(|e| Error::io(&file, e))
    }

    pub fn flows_file(&self, base: &Path, split: Split) -> Result<PathBuf> {
        match split {
            Split::Train => Ok(base.join(&self.flows_path)),
            Split::Test => self
                .test_flows_path
                .as_ref()
                .map(|p| base.join(p))
                .ok_or_else(|| Error::Config("manifest has no test_flows_path".into())),
        }
    }

    /// Loads one split, attaching teacher outputs for its flows when the
    /// manifest names a teacher file. Declared dimensions are enforced.
    pub fn load_split(&self, base: &Path, split: Split) -> Result<LabeledDataset> {
        let mut ds = load_flows(self.flows_file(base, split)?, self.num_classes)?;
        for f in &ds.flows {
            let dim = f.input_dim().ok_or_else(|| Error::EmptyFlow(f.id.clone()))?;
            if dim != self.feature_dim {
                return Err(Error::dims(format!("features of flow `{}`", f.id), self.feature_dim, dim));
            }
        }
        if let Some(tp) = &self.teacher_path {
            let teacher = self.load_teacher_file(&base.join(tp))?;
            let ids: std::collections::HashSet<&str> = ds.flows.iter().map(|f| f.id.as_str()).collect();
            let own: TeacherMap = teacher.into_iter().filter(|(k, _)| ids.contains(k.as_str())).collect();
            ds.attach_teacher(own)?;
        }
        Ok(ds)
    }

    pub fn load_teacher_file(&self, path: &Path) -> Result<TeacherMap> {
        load_teacher(
            path,
            TeacherDims {
                embedding_dim: Some(self.embedding_dim),
                num_classes: Some(self.num_classes),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn featurize_uniform_payload() {
        let v = featurize_payload(&[0x41; 128]).unwrap();
        assert_eq!(v.len(), FEATURE_DIM);
        for (i, &x) in v[..256].iter().enumerate() {
            assert_eq!(x, if i == 65 { 1.0 } else { 0.0 });
        }
        assert!(v[256..].iter().all(|&x| x == 65.0 / 255.0));
    }

    #[test]
    fn featurize_edge_cases() {
        assert!(matches!(featurize_payload(&[]), Err(Error::EmptyPayload)));
        let mut b = vec![7u8; 40];
        let a = featurize_payload(&b).unwrap();
        b[3] = 8;
        assert_ne!(a, featurize_payload(&b).unwrap());
        // Short first packet: prefix slots past its end stay zero.
        assert!(a[256 + 40..].iter().all(|&x| x == 0.0));
        // Only the first 128 bytes of a packet and the first 5 packets count.
        let long = [vec![1u8; 128], vec![2u8; 500]].concat();
        assert_eq!(featurize_payload(&long).unwrap(), featurize_payload(&[1u8; 128]).unwrap());
        let p = [1u8; 10];
        let six: Vec<&[u8]> = vec![&p, &p, &p, &p, &p, &[9u8; 10]];
        let v = featurize(&six, Truncation::default()).unwrap();
        assert_eq!(v[1], 1.0);
        assert_eq!(v[9], 0.0);
    }

    #[test]
    fn load_flows_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "f.jsonl",
            "{\"id\":\"a\",\"features\":[1.0,2.0],\"label\":0}\n\
             {\"id\":\"b\",\"features\":[0.5,0.5],\"label\":1}\n\
             {\"id\":\"c\",\"payload_hex\":\"4141\"}\n",
        );
        let ds = load_flows(&p, 2).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.flows[2].payload.as_deref(), Some(&b"AA"[..]));
        assert!(ds.flows[2].features.is_none());

        let bad = write(dir.path(), "bad.jsonl", "{\"id\":\"a\",\"features\":[1.0],\"label\":2}\n");
        let err = load_flows(&bad, 2).unwrap_err().to_string();
        assert!(err.contains("label out of range") && err.contains(":1:"), "{err}");

        let dup = write(
            dir.path(),
            "dup.jsonl",
            "{\"id\":\"a\",\"features\":[1.0]}\n{\"id\":\"a\",\"features\":[1.0]}\n",
        );
        assert!(load_flows(&dup, 2).unwrap_err().to_string().contains(":2:"));

        let junk = write(dir.path(), "junk.jsonl", "{\"id\":\"a\",\"features\":[1.0]}\nnot json\n");
        assert!(load_flows(&junk, 2).unwrap_err().to_string().contains(":2:"));
    }

    #[test]
    fn flows_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"id\":\"a\",\"features\":[0.1,-2.5e-7,3.0],\"label\":1}\n\
                    {\"id\":\"b\",\"payload_hex\":\"00ff10\"}\n";
        let p = write(dir.path(), "f.jsonl", body);
        let ds = load_flows(&p, 2).unwrap();
        let out = dir.path().join("g.jsonl");
        write_flows(&out, &ds.flows).unwrap();
        let again = load_flows(&out, 2).unwrap();
        assert_eq!(again.flows, ds.flows);
        let out2 = dir.path().join("h.jsonl");
        write_flows(&out2, &again.flows).unwrap();
        assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());
    }

    #[test]
    fn load_teacher_examples() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(dir.path(), "t.jsonl", "{\"id\":\"a\",\"embedding\":[1.0,0.0],\"probs\":[0.5,0.5]}\n");
        let t = load_teacher(&ok, TeacherDims::default()).unwrap();
        assert_eq!(t["a"].probs, vec![0.5, 0.5]);

        let sum = write(dir.path(), "s.jsonl", "{\"id\":\"a\",\"embedding\":[1.0,0.0],\"probs\":[0.5,0.6]}\n");
        assert!(load_teacher(&sum, TeacherDims::default()).unwrap_err().to_string().contains("sum to"));

        let dims = TeacherDims {
            embedding_dim: Some(3),
            num_classes: Some(2),
        };
        let e = load_teacher(&ok, dims).unwrap_err().to_string();
        assert!(e.contains("embedding dimension mismatch"), "{e}");
    }

    #[test]
    fn manifest_enforces_feature_dim() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.jsonl", "{\"id\":\"a\",\"features\":[1.0,2.0],\"label\":0}\n");
        let m = DatasetManifest {
            flows_path: "train.jsonl".into(),
            test_flows_path: None,
            teacher_path: None,
            num_classes: 2,
            feature_dim: 3,
            embedding_dim: 2,
            synth: None,
            separability: None,
        };
        m.save(dir.path()).unwrap();
        let (m2, base) = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert!(matches!(
            m2.load_split(&base, Split::Train),
            Err(Error::DimensionMismatch { expected: 3, got: 2, .. })
        ));
        assert!(m2.load_split(&base, Split::Test).is_err());
    }
}
