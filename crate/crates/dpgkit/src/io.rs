//! File formats: annotation JSON, question lists, corpus directories, and
//! versioned model files.
//!
//! Annotation boxes are stored in units of the recorded image size, so
//! pixel-space annotations normalize at ingest by dividing through
//! width/height. Writers always emit `width = height = 1` with normalized
//! boxes, which makes the round trip exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::candidates::{CandidateSet, Provenance};
use crate::dpg::{
    Constituent, ConstituentCategory, Dpg, Relationship, RelationshipCategory, ValidationError,
};
use crate::dqa::DiagramQuestion;
use crate::geom::BBox;

pub const MODEL_FORMAT: &str = "dpgkit-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("schema error at {json_path}: {message}")]
    Schema { json_path: String, message: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("question {index}: {message}")]
    Question { index: usize, message: String },
    #[error("model file is `{found}`, expected `{expected}`")]
    ModelKind { expected: String, found: String },
    #[error("unsupported model format/version: {0} v{1}")]
    ModelVersion(String, u32),
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn from_json_slice<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, IoError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(&mut de).map_err(|e| IoError::Schema {
        json_path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageDims {
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawConstituent {
    id: String,
    category: ConstituentCategory,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawRelationship {
    id: String,
    category: RelationshipCategory,
    members: Vec<String>,
    score: f64,
}

/// The annotation JSON document. Holds either a ground-truth graph or a
/// scored candidate set; which one it becomes is decided at promotion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Annotation {
    image: ImageDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    constituents: Vec<RawConstituent>,
    relationships: Vec<RawRelationship>,
}

impl Annotation {
    pub fn from_json(bytes: &[u8]) -> Result<Self, IoError> {
        let ann: Annotation = from_json_slice(bytes)?;
        if ann.image.width == 0 || ann.image.height == 0 {
            return Err(IoError::Schema {
                json_path: "image".into(),
                message: "width and height must be positive".into(),
            });
        }
        Ok(ann)
    }

    pub fn to_json(&self) -> String {
        to_pretty_json(self)
    }

    fn constituents_normalized(&self) -> Vec<Constituent> {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        self.constituents
            .iter()
            .map(|c| Constituent {
                id: c.id.clone().into(),
                category: c.category,
                bbox: BBox::new(c.bbox[0] / w, c.bbox[1] / h, c.bbox[2] / w, c.bbox[3] / h),
                score: c.score,
                text: c.text.clone(),
            })
            .collect()
    }

    fn relationships_normalized(&self) -> Vec<Relationship> {
        self.relationships
            .iter()
            .map(|r| Relationship {
                id: r.id.clone().into(),
                category: r.category,
                members: r.members.iter().map(|m| m.clone().into()).collect(),
                score: r.score,
            })
            .collect()
    }

    pub fn into_dpg(self) -> Result<Dpg, IoError> {
        Ok(Dpg::new(
            self.constituents_normalized(),
            self.relationships_normalized(),
        )?)
    }

    pub fn into_candidates(self) -> Result<CandidateSet, IoError> {
        let provenance = self.provenance.unwrap_or_default();
        Ok(CandidateSet::new(
            self.constituents_normalized(),
            self.relationships_normalized(),
            provenance,
        )?)
    }

    pub fn from_dpg(dpg: &Dpg) -> Self {
        Self {
            image: ImageDims {
                width: 1,
                height: 1,
            },
            provenance: None,
            constituents: dpg.nodes().map(raw_constituent).collect(),
            relationships: dpg.edges().map(raw_relationship).collect(),
        }
    }

    pub fn from_candidates(set: &CandidateSet) -> Self {
        Self {
            image: ImageDims {
                width: 1,
                height: 1,
            },
            provenance: Some(set.provenance),
            constituents: set.constituents().map(raw_constituent).collect(),
            relationships: set.relationships().iter().map(raw_relationship).collect(),
        }
    }
}

fn raw_constituent(c: &Constituent) -> RawConstituent {
    RawConstituent {
        id: c.id.as_str().to_owned(),
        category: c.category,
        bbox: [c.bbox.x0, c.bbox.y0, c.bbox.x1, c.bbox.y1],
        score: c.score,
        text: c.text.clone(),
    }
}

fn raw_relationship(r: &Relationship) -> RawRelationship {
    RawRelationship {
        id: r.id.as_str().to_owned(),
        category: r.category,
        members: r.members.iter().map(|m| m.as_str().to_owned()).collect(),
        score: r.score,
    }
}

pub fn dpg_to_json(dpg: &Dpg) -> String {
    Annotation::from_dpg(dpg).to_json()
}

pub fn dpg_from_json(bytes: &[u8]) -> Result<Dpg, IoError> {
    Annotation::from_json(bytes)?.into_dpg()
}

pub fn candidates_to_json(set: &CandidateSet) -> String {
    Annotation::from_candidates(set).to_json()
}

pub fn candidates_from_json(bytes: &[u8]) -> Result<CandidateSet, IoError> {
    Annotation::from_json(bytes)?.into_candidates()
}

pub fn read_dpg(path: &Path) -> Result<Dpg, IoError> {
    dpg_from_json(&read_file(path)?)
}

pub fn write_dpg(path: &Path, dpg: &Dpg) -> Result<(), IoError> {
    write_file(path, &dpg_to_json(dpg))
}

pub fn read_candidates(path: &Path) -> Result<CandidateSet, IoError> {
    candidates_from_json(&read_file(path)?)
}

pub fn write_candidates(path: &Path, set: &CandidateSet) -> Result<(), IoError> {
    write_file(path, &candidates_to_json(set))
}

pub fn read_questions(path: &Path) -> Result<Vec<DiagramQuestion>, IoError> {
    let questions: Vec<DiagramQuestion> = from_json_slice(&read_file(path)?)?;
    for (index, q) in questions.iter().enumerate() {
        if !(1..=4).contains(&q.gold) {
            return Err(IoError::Question {
                index,
                message: format!("gold index {} outside 1..=4", q.gold),
            });
        }
        if q.question.trim().is_empty() {
            return Err(IoError::Question {
                index,
                message: "empty question".into(),
            });
        }
    }
    Ok(questions)
}

pub fn write_questions(path: &Path, questions: &[DiagramQuestion]) -> Result<(), IoError> {
    write_file(path, &to_pretty_json(&questions))
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelEnvelope<T> {
    format: String,
    version: u32,
    kind: String,
    payload: T,
}

/// Writes a model as versioned, self-describing JSON.
pub fn save_model<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<(), IoError> {
    let envelope = ModelEnvelope {
        format: MODEL_FORMAT.to_owned(),
        version: MODEL_VERSION,
        kind: kind.to_owned(),
        payload,
    };
    write_file(path, &to_pretty_json(&envelope))
}

/// Reads a model file, checking format, version, and kind.
pub fn load_model<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T, IoError> {
    let envelope: ModelEnvelope<T> = from_json_slice(&read_file(path)?)?;
    if envelope.format != MODEL_FORMAT || envelope.version != MODEL_VERSION {
        return Err(IoError::ModelVersion(envelope.format, envelope.version));
    }
    if envelope.kind != kind {
        return Err(IoError::ModelKind {
            expected: kind.to_owned(),
            found: envelope.kind,
        });
    }
    Ok(envelope.payload)
}

/// Reads the kind tag of a model file without deserializing its payload.
pub fn peek_model_kind(path: &Path) -> Result<String, IoError> {
    #[derive(Deserialize)]
    struct KindOnly {
        format: String,
        version: u32,
        kind: String,
    }
    let head: KindOnly = from_json_slice(&read_file(path)?)?;
    if head.format != MODEL_FORMAT || head.version != MODEL_VERSION {
        return Err(IoError::ModelVersion(head.format, head.version));
    }
    Ok(head.kind)
}

/// Directory layout of one corpus split.
#[derive(Debug, Clone)]
pub struct SplitDirs {
    pub truth: PathBuf,
    pub candidates: PathBuf,
    pub questions: PathBuf,
}

pub fn split_dirs(root: &Path, split: &str) -> SplitDirs {
    let base = root.join(split);
    SplitDirs {
        truth: base.join("truth"),
        candidates: base.join("candidates"),
        questions: base.join("questions"),
    }
}

/// Sorted stems of the `.json` files in a directory.
pub fn diagram_ids_in(dir: &Path) -> Result<Vec<String>, IoError> {
    let entries = fs::read_dir(dir).map_err(|source| IoError::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| IoError::File {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// One fully loaded diagram of a corpus split.
#[derive(Debug, Clone)]
pub struct DiagramRecord {
    pub id: String,
    pub truth: Dpg,
    pub candidates: CandidateSet,
    pub questions: Vec<DiagramQuestion>,
}

/// Loads every diagram of a split, in id order. Question files are
/// optional per diagram.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<DiagramRecord>, IoError> {
    let dirs = split_dirs(root, split);
    let ids = diagram_ids_in(&dirs.truth)?;
    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let truth = read_dpg(&dirs.truth.join(format!("{id}.json")))?;
        let candidates = read_candidates(&dirs.candidates.join(format!("{id}.json")))?;
        let question_path = dirs.questions.join(format!("{id}.json"));
        let questions = if question_path.exists() {
            read_questions(&question_path)?
        } else {
            Vec::new()
        };
        records.push(DiagramRecord {
            id,
            truth,
            candidates,
            questions,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_dpg() -> Dpg {
        let nodes = vec![
            Constituent::new(
                "b1",
                ConstituentCategory::Blob,
                BBox::new(0.125, 0.25, 0.375, 0.5),
                1.0,
            ),
            Constituent::new(
                "t1",
                ConstituentCategory::TextBox,
                BBox::new(0.5, 0.5, 0.75, 0.625),
                0.5,
            )
            .with_text("fox"),
        ];
        let edges = vec![Relationship::new(
            "r1",
            RelationshipCategory::R1,
            vec!["t1".into(), "b1".into()],
            0.25,
        )];
        Dpg::new(nodes, edges).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dpg = sample_dpg();
        let json = dpg_to_json(&dpg);
        let back = dpg_from_json(json.as_bytes()).unwrap();
        assert_eq!(dpg, back);
    }

    #[test]
    fn missing_category_reports_json_path() {
        let json = br#"{
            "image": {"width": 1, "height": 1},
            "constituents": [{"id": "b1", "box": [0,0,0.5,0.5], "score": 1.0}],
            "relationships": []
        }"#;
        let err = Annotation::from_json(json).unwrap_err();
        match err {
            IoError::Schema { json_path, message } => {
                assert!(json_path.contains("constituents"), "path was {json_path}");
                assert!(message.contains("category"), "message was {message}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn pixel_annotations_normalize_at_ingest() {
        let json = br#"{
            "image": {"width": 800, "height": 600},
            "constituents": [
                {"id": "b1", "category": "blob", "box": [80, 60, 400, 300], "score": 1.0}
            ],
            "relationships": []
        }"#;
        let dpg = dpg_from_json(json).unwrap();
        let b = dpg.node(&"b1".into()).unwrap().bbox;
        assert!((b.x0 - 0.1).abs() < 1e-12);
        assert!((b.y0 - 0.1).abs() < 1e-12);
        assert!((b.x1 - 0.5).abs() < 1e-12);
        assert!((b.y1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn model_kind_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, "exit-model", &vec![1.0f64, 2.0]).unwrap();
        assert_eq!(peek_model_kind(&path).unwrap(), "exit-model");
        let err = load_model::<Vec<f64>>(&path, "dsdp-net").unwrap_err();
        assert!(matches!(err, IoError::ModelKind { .. }));
    }
}
