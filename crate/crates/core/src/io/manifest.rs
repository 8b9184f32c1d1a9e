use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Infrared,
}

/// One image in a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub path: String,
    pub source_dataset: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    /// Per-pixel label raster for segmentation corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<String>,
}

impl ImageRecord {
    pub fn new(path: impl Into<String>, source: impl Into<String>, modality: Modality) -> Self {
        Self {
            path: path.into(),
            source_dataset: source.into(),
            modality,
            sequence_id: None,
            frame_index: None,
            class_label: None,
            label_path: None,
        }
    }

    pub fn with_frame(mut self, sequence: impl Into<String>, index: u64) -> Self {
        self.sequence_id = Some(sequence.into());
        self.frame_index = Some(index);
        self
    }

    pub fn with_class(mut self, class: impl Into<String>) -> Self {
        self.class_label = Some(class.into());
        self
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.path.is_empty() {
            return Err("empty path".into());
        }
        if self.sequence_id.is_some() != self.frame_index.is_some() {
            return Err("frame_index must be present exactly when sequence_id is".into());
        }
        Ok(())
    }
}

/// One applied curation step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub step: String,
    pub detail: String,
}

impl Provenance {
    pub fn new(step: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            step: step.into(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub records: Vec<ImageRecord>,
    pub provenance: Vec<Provenance>,
}

impl CorpusManifest {
    /// Builds a manifest, rejecting duplicate paths and inconsistent frame fields.
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.check().map_err(|message| Error::Manifest {
                line: i + 1,
                message,
            })?;
            if let Some(first) = seen.insert(r.path.as_str(), i + 1) {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!("duplicate path `{}` (first seen at record {first})", r.path),
                });
            }
        }
        Ok(Self {
            records,
            provenance: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Parses one JSON object per line. `# provenance` lines written by
/// [`write_manifest`] are read back; other `#` comments and blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<CorpusManifest> {
    let mut records = Vec::new();
    let mut provenance = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if let Some(entry) = trimmed.strip_prefix(PROVENANCE_PREFIX) {
            provenance.push(serde_json::from_str(entry).map_err(|e| Error::Manifest {
                line,
                message: format!("bad provenance entry: {e}"),
            })?);
            continue;
        }
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(trimmed).map_err(|e| Error::Manifest {
            line,
            message: e.to_string(),
        })?;
        record
            .check()
            .map_err(|message| Error::Manifest { line, message })?;
        if let Some(first) = seen.insert(record.path.clone(), line) {
            return Err(Error::Manifest {
                line,
                message: format!(
                    "duplicate path `{}` (first seen on line {first})",
                    record.path
                ),
            });
        }
        records.push(record);
    }
    Ok(CorpusManifest {
        records,
        provenance,
    })
}

const PROVENANCE_PREFIX: &str = "# provenance ";

/// Serializes records one per line; provenance goes into leading comment lines.
pub fn write_manifest(manifest: &CorpusManifest) -> String {
    let mut out = String::new();
    for p in &manifest.provenance {
        out.push_str(PROVENANCE_PREFIX);
        out.push_str(&serde_json::to_string(p).expect("provenance serializes"));
        out.push('\n');
    }
    for r in &manifest.records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_empty_manifest() {
        let m = parse_manifest("").unwrap();
        assert!(m.is_empty());
        assert!(m.provenance.is_empty());
    }

    #[test]
    fn duplicate_path_names_second_line() {
        let text = r#"{"path":"a.png","source_dataset":"x","modality":"rgb"}
{"path":"a.png","source_dataset":"y","modality":"infrared"}"#;
        match parse_manifest(text).unwrap_err() {
            Error::Manifest { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"path\":\"a\",\"source_dataset\":\"x\",\"modality\":\"rgb\"}\n\nnot json\n";
        assert!(matches!(
            parse_manifest(text),
            Err(Error::Manifest { line: 3, .. })
        ));
        let text = r#"{"path":"a","source_dataset":"x","modality":"rgb","sequence_id":"s"}"#;
        assert!(matches!(
            parse_manifest(text),
            Err(Error::Manifest { line: 1, .. })
        ));
        let text = r#"{"path":"a","source_dataset":"x","modality":"uv"}"#;
        assert!(parse_manifest(text).is_err());
    }

    #[test]
    fn write_then_parse_keeps_records() {
        let mut m = CorpusManifest::new(vec![
            ImageRecord::new("a", "kaist", Modality::Infrared).with_frame("s1", 3),
            ImageRecord::new("b", "imagenet", Modality::Rgb).with_class("n01"),
        ])
        .unwrap();
        m.provenance.push(Provenance::new("mix", "two sources"));
        let back = parse_manifest(&write_manifest(&m)).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.provenance, m.provenance);
        let plain = parse_manifest(
            "# a note\n{\"path\":\"a\",\"source_dataset\":\"x\",\"modality\":\"rgb\"}\n",
        )
        .unwrap();
        assert!(plain.provenance.is_empty());
        assert!(matches!(
            parse_manifest("# provenance {oops"),
            Err(Error::Manifest { line: 1, .. })
        ));
    }
}
