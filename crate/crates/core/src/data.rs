//! Corpus records, triplets, and the JSONL interchange formats.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An image identity standing in for real pixels: its features live in a
/// learnable table or an ingested embedding file, keyed by `id`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    /// Cluster of visually analogous images, when the corpus provides one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_id: Option<String>,
    /// Coarse class, when the corpus provides one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    /// Attribute labels; sorted set so derived text is deterministic.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub labels: BTreeSet<String>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            set_id: None,
            category: None,
            labels: BTreeSet::new(),
        }
    }
}

/// Where a mined pair or a generated modifier came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Set,
    Category,
    Label,
    Oracle,
    Model,
    External,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Set => "set",
            Source::Category => "category",
            Source::Label => "label",
            Source::Oracle => "oracle",
            Source::Model => "model",
            Source::External => "external",
        }
    }
}

/// One unit of retrieval supervision: change `ref_id` as `modifier` says and
/// you should land on `target_id`. `reverse` optionally caches the text for
/// the opposite direction, used by the prototype loss during finetuning.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Triplet {
    pub ref_id: String,
    pub target_id: String,
    pub modifier: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reverse: Option<String>,
}

/// An ordered candidate pair produced by mining, before text generation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairSpec {
    pub ref_id: String,
    pub target_id: String,
    pub origin: Source,
}

/// Read one serde-decodable record per line; blank lines are skipped and the
/// first malformed line aborts with its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Write one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::contract(format!("serialize record: {e}")))?;
        writeln!(writer, "{line}").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<ImageRecord>> {
    let records: Vec<ImageRecord> = read_jsonl(path)?;
    validate_corpus(&records)?;
    Ok(records)
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    read_jsonl(path)
}

/// Every image id must be unique within a corpus.
pub fn validate_corpus(records: &[ImageRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if r.id.is_empty() {
            return Err(Error::contract("corpus record with empty id".to_string()));
        }
        if !seen.insert(r.id.as_str()) {
            return Err(Error::contract(format!("duplicate image id `{}`", r.id)));
        }
    }
    Ok(())
}

/// Index a corpus by image id for lookup during encoding and mining.
pub fn index_corpus(records: &[ImageRecord]) -> BTreeMap<&str, &ImageRecord> {
    records.iter().map(|r| (r.id.as_str(), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn corpus_round_trip() {
        let mut rec = ImageRecord::new("img1");
        rec.set_id = Some("s1".to_string());
        rec.labels.insert("logo".to_string());
        let json = serde_json::to_string(&rec).unwrap();
        let back: ImageRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(rec, back);
    }

    #[test]
    fn optional_fields_default() {
        let rec: ImageRecord = serde_json::from_str(r#"{"id":"x"}"#).unwrap();
        assert_eq!(rec.id, "x");
        assert!(rec.set_id.is_none());
        assert!(rec.labels.is_empty());
    }

    #[test]
    fn triplet_reverse_is_optional_and_omitted_when_absent() {
        let t = Triplet {
            ref_id: "a".into(),
            target_id: "b".into(),
            modifier: "add logo".into(),
            source: Source::Oracle,
            reverse: None,
        };
        let json = serde_json::to_string(&t).unwrap();
        assert!(!json.contains("reverse"));
        assert!(json.contains(r#""source":"oracle""#));
        let back: Triplet = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn parse_error_carries_line_number() {
        let f = write_temp(&[r#"{"id":"a"}"#, "not json", r#"{"id":"b"}"#]);
        let err = read_corpus(f.path()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_required_field_is_a_parse_error() {
        let f = write_temp(&[r#"{"ref_id":"a","target_id":"b","modifier":"m"}"#]);
        let err = read_triplets(f.path()).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 1);
                assert!(msg.contains("source"), "msg was: {msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_temp(&[r#"{"id":"a"}"#, r#"{"id":"a"}"#]);
        assert!(read_corpus(f.path()).is_err());
    }

    #[test]
    fn blank_lines_skipped() {
        let f = write_temp(&[r#"{"id":"a"}"#, "", r#"{"id":"b"}"#]);
        assert_eq!(read_corpus(f.path()).unwrap().len(), 2);
    }
}
