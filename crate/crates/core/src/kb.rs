//! Disease document store with dense cosine retrieval.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dialogue::{keep_first_chars, keep_last_chars, HISTORY_CHAR_BUDGET};
use crate::encoder::{DiagEncoder, Truncation};
use crate::error::ModelError;

/// Character budget of a serialized document.
pub const DOC_CHAR_BUDGET: usize = 512;
/// Top-1 similarities below this are flagged for display.
pub const LOW_CONFIDENCE: f64 = 0.2;
pub const RUNNER_UPS: usize = 5;

/// Field markers in serialization order.
pub const FIELD_LABELS: [&str; 10] = [
    "疾病名称", "概述", "症状", "治疗", "检查", "鉴别", "病因", "预防", "并发症", "疾病用药",
];

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("document is missing required fields: {0:?}")]
    Invalid(Vec<String>),
    #[error("index was built with encoder {index}, current encoder is {encoder}; reindex required")]
    ReindexRequired { index: String, encoder: String },
    #[error("embedding has {found} dimensions, index uses {expected}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("kb io: {0}")]
    Io(#[from] std::io::Error),
    #[error("kb format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiseaseDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub name: String,
    pub overview: String,
    pub symptoms: String,
    pub treatment: String,
    pub examination: String,
    pub identification: String,
    pub etiology: String,
    pub prevention: String,
    pub complications: String,
    pub medication: String,
}

impl DiseaseDoc {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    /// Field values in serialization order.
    pub fn fields(&self) -> [&str; 10] {
        [
            &self.name,
            &self.overview,
            &self.symptoms,
            &self.treatment,
            &self.examination,
            &self.identification,
            &self.etiology,
            &self.prevention,
            &self.complications,
            &self.medication,
        ]
    }

    pub fn validate(&self) -> Result<(), KbError> {
        if self.name.trim().is_empty() {
            return Err(KbError::Invalid(vec!["name".into()]));
        }
        Ok(())
    }
}

/// `label: value` lines in fixed order, empty optional fields skipped,
/// cut to [`DOC_CHAR_BUDGET`] characters from the right.
pub fn compose_document(doc: &DiseaseDoc) -> Result<String, KbError> {
    doc.validate()?;
    let lines: Vec<String> = FIELD_LABELS
        .iter()
        .zip(doc.fields())
        .enumerate()
        .filter(|(i, (_, v))| *i == 0 || !v.trim().is_empty())
        .map(|(_, (label, v))| format!("{label}: {}", v.trim()))
        .collect();
    Ok(keep_first_chars(&lines.join("\n"), DOC_CHAR_BUDGET))
}

/// Reads a line-delimited document file; records without a name are
/// rejected with their line number.
pub fn load_docs(path: impl AsRef<Path>) -> Result<Vec<DiseaseDoc>, KbError> {
    let body = fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: DiseaseDoc = serde_json::from_str(line)?;
        doc.validate()
            .map_err(|_| KbError::Invalid(vec![format!("line {}: name", i + 1)]))?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Cosine similarity clamped to [-1, 1]; zero when either norm is below
/// 1e-12.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub doc_id: u64,
    pub similarity: f64,
    pub low_confidence: bool,
    /// Next best documents, best first.
    pub runner_ups: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub doc: DiseaseDoc,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbIndex {
    encoder_version: String,
    next_id: u64,
    entries: BTreeMap<u64, KbEntry>,
}

impl KbIndex {
    pub fn new(encoder_version: impl Into<String>) -> Self {
        Self {
            encoder_version: encoder_version.into(),
            next_id: 1,
            entries: BTreeMap::new(),
        }
    }

    pub fn for_encoder(encoder: &DiagEncoder) -> Self {
        Self::new(encoder.version())
    }

    pub fn encoder_version(&self) -> &str {
        &self.encoder_version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&KbEntry> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &KbEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    fn check_encoder(&self, encoder: &DiagEncoder) -> Result<(), KbError> {
        if encoder.version() != self.encoder_version {
            return Err(KbError::ReindexRequired {
                index: self.encoder_version.clone(),
                encoder: encoder.version().to_string(),
            });
        }
        Ok(())
    }

    /// Stores a document with a precomputed embedding and returns its id.
    pub fn insert_embedded(&mut self, mut doc: DiseaseDoc, embedding: Vec<f64>) -> Result<u64, KbError> {
        doc.validate()?;
        if let Some((_, first)) = self.entries.iter().next() {
            if first.embedding.len() != embedding.len() {
                return Err(KbError::Dimension {
                    expected: first.embedding.len(),
                    found: embedding.len(),
                });
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        doc.id = Some(id);
        self.entries.insert(id, KbEntry { doc, embedding });
        Ok(id)
    }

    /// Embeds the serialized document with `encoder` and stores it; no other
    /// entry is touched.
    pub fn index_document(&mut self, encoder: &DiagEncoder, doc: DiseaseDoc) -> Result<u64, KbError> {
        self.check_encoder(encoder)?;
        let text = compose_document(&doc)?;
        let embedding = encoder.cls(&text, Truncation::Right)?;
        self.insert_embedded(doc, embedding)
    }

    /// Recomputes every embedding with `encoder` and adopts its version.
    pub fn reindex(&mut self, encoder: &DiagEncoder) -> Result<(), KbError> {
        for entry in self.entries.values_mut() {
            entry.embedding = encoder.cls(&compose_document(&entry.doc)?, Truncation::Right)?;
        }
        self.encoder_version = encoder.version().to_string();
        Ok(())
    }

    /// Every document scored against `query`, best first, ties by id.
    pub fn rank(&self, query: &[f64]) -> Vec<(u64, f64)> {
        let mut scored: Vec<(u64, f64)> = self
            .entries
            .iter()
            .map(|(id, e)| (*id, cosine(query, &e.embedding)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    }

    /// Best match by exhaustive scan; `None` on an empty index.
    pub fn retrieve_embedding(&self, query: &[f64]) -> Option<RetrievalResult> {
        let mut ranked = self.rank(query).into_iter();
        let (doc_id, similarity) = ranked.next()?;
        Some(RetrievalResult {
            doc_id,
            similarity,
            low_confidence: similarity < LOW_CONFIDENCE,
            runner_ups: ranked.take(RUNNER_UPS).collect(),
        })
    }

    pub fn retrieve_top1(&self, encoder: &DiagEncoder, history_text: &str) -> Result<Option<RetrievalResult>, KbError> {
        if self.is_empty() {
            return Ok(None);
        }
        self.check_encoder(encoder)?;
        Ok(self.retrieve_embedding(&embed_dialogue(encoder, history_text)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KbError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// `[CLS]` embedding of the most recent [`HISTORY_CHAR_BUDGET`] characters
/// of a dialogue history.
pub fn embed_dialogue(encoder: &DiagEncoder, history_text: &str) -> Result<Vec<f64>, KbError> {
    let text = keep_last_chars(history_text, HISTORY_CHAR_BUDGET);
    Ok(encoder.cls(&text, Truncation::Left)?)
}
