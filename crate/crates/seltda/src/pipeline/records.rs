//! Dataset records, manifests, and their JSONL persistence.
//!
//! A [`VQARecord`] never stores the image tensor — only the scene seed and
//! style tag needed to regenerate it against a known world. Datasets hash to
//! a SHA-256 of their canonical JSONL bytes, which is what run manifests and
//! the byte-identical-rerun check compare.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::synthworld::Family;

/// Where a record's label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Oracle-labeled record from a generated corpus.
    Real,
    /// Teacher-generated pseudolabel.
    Synthetic,
}

/// Family tag on a record: a known template family for oracle-generated
/// records, or the free-form `"generated"` marker for pseudolabels (the
/// teacher is not told which family it sampled).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FamilyTag {
    Known(Family),
    Other(String),
}

/// Marker used for pseudolabeled records.
pub const GENERATED_FAMILY: &str = "generated";

impl FamilyTag {
    pub fn generated() -> FamilyTag {
        FamilyTag::Other(GENERATED_FAMILY.to_string())
    }

    pub fn known(&self) -> Option<Family> {
        match self {
            FamilyTag::Known(f) => Some(*f),
            FamilyTag::Other(_) => None,
        }
    }
}

impl fmt::Display for FamilyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FamilyTag::Known(family) => f.write_str(family.label()),
            FamilyTag::Other(s) => f.write_str(s),
        }
    }
}

/// Decoding provenance attached to synthetic records only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub top_p: f64,
    pub temperature: f64,
    /// Label of the RNG stream that produced this sample, e.g.
    /// `pseudolabel/unl-000042/3`.
    pub rng_stream: String,
    pub parse_status: String,
}

/// One question-answer pair tied to a regenerable image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VQARecord {
    pub id: String,
    pub scene_seed: u64,
    pub style_tag: String,
    /// Content hash of the world the scene seed is interpreted under.
    pub world_hash: String,
    pub question: String,
    pub answer: String,
    pub family: FamilyTag,
    pub provenance: Provenance,
    /// Ties rephrasings to their original record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationMeta>,
}

impl VQARecord {
    /// Checks the provenance/metadata pairing rule for a single record.
    fn check(&self) -> Result<(), RecordError> {
        match (self.provenance, self.generation.is_some()) {
            (Provenance::Real, true) => Err(RecordError::RealWithGenerationMeta(self.id.clone())),
            (Provenance::Synthetic, false) => {
                Err(RecordError::SyntheticWithoutGenerationMeta(self.id.clone()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("real record {0:?} carries generation metadata")]
    RealWithGenerationMeta(String),
    #[error("synthetic record {0:?} is missing generation metadata")]
    SyntheticWithoutGenerationMeta(String),
    #[error("dataset io failed for {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record on line {line} of {path}")]
    Malformed {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// An ordered dataset split with provenance counts and a content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub real_count: usize,
    pub synthetic_count: usize,
    /// SHA-256 of the canonical JSONL bytes of `records`.
    pub content_hash: String,
    pub records: Vec<VQARecord>,
}

impl DatasetManifest {
    /// Validates records (unique ids, provenance/metadata pairing) and
    /// computes counts and the content hash.
    pub fn new(split: impl Into<String>, records: Vec<VQARecord>) -> Result<Self, RecordError> {
        let mut seen = BTreeSet::new();
        let mut real_count = 0;
        let mut synthetic_count = 0;
        for record in &records {
            record.check()?;
            if !seen.insert(record.id.as_str()) {
                return Err(RecordError::DuplicateId(record.id.clone()));
            }
            match record.provenance {
                Provenance::Real => real_count += 1,
                Provenance::Synthetic => synthetic_count += 1,
            }
        }
        let content_hash = hash_jsonl(&records);
        Ok(DatasetManifest {
            split: split.into(),
            real_count,
            synthetic_count,
            content_hash,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Serializes records to canonical JSONL: one compact JSON object per
    /// line, fixed field order, trailing newline.
    pub fn canonical_jsonl(&self) -> String {
        canonical_jsonl(&self.records)
    }

    /// Writes the canonical JSONL atomically (temp file then rename).
    pub fn save_jsonl(&self, path: &Path) -> Result<(), RecordError> {
        crate::pipeline::atomic_write(path, self.canonical_jsonl().as_bytes())
            .map_err(|source| RecordError::Io { path: path.display().to_string(), source })
    }

    /// Loads a JSONL dataset, re-validating and re-hashing its records.
    pub fn load_jsonl(path: &Path, split: impl Into<String>) -> Result<Self, RecordError> {
        let text = fs::read_to_string(path)
            .map_err(|source| RecordError::Io { path: path.display().to_string(), source })?;
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: VQARecord = serde_json::from_str(line).map_err(|source| {
                RecordError::Malformed { path: path.display().to_string(), line: idx + 1, source }
            })?;
            records.push(record);
        }
        DatasetManifest::new(split, records)
    }
}

/// Canonical JSONL encoding shared by hashing and persistence.
pub fn canonical_jsonl(records: &[VQARecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// SHA-256 hex digest of the canonical JSONL bytes.
pub fn hash_jsonl(records: &[VQARecord]) -> String {
    let digest = Sha256::digest(canonical_jsonl(records).as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        use fmt::Write;
        write!(hex, "{byte:02x}").expect("hex digest");
    }
    hex
}
