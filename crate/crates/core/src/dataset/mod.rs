//! Question/answer records, JSONL I/O, stage partitioning and splits.

mod split;
mod synth;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arabic_text::normalize;
use crate::error::{Error, Result};
use crate::severity::SeverityLabel;

pub use split::{stage_split, train_eval_split, StagePartition};
pub use synth::{synth_generate, SynthTemplates};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaRecord {
    pub id: u64,
    pub question: String,
    pub answer: String,
    pub severity: Option<SeverityLabel>,
}

impl QaRecord {
    pub fn new(id: u64, question: impl Into<String>, answer: impl Into<String>) -> Self {
        QaRecord {
            id,
            question: question.into(),
            answer: answer.into(),
            severity: None,
        }
    }

    pub fn with_severity(mut self, severity: SeverityLabel) -> Self {
        self.severity = Some(severity);
        self
    }
}

/// One JSONL line. Unknown keys (MAQA carries a few) are ignored.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine<'a> {
    question: std::borrow::Cow<'a, str>,
    answer: std::borrow::Cow<'a, str>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    severity: Option<std::borrow::Cow<'a, str>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityStats {
    pub mild: usize,
    pub moderate: usize,
    pub critical: usize,
    /// Labeled records; always `mild + moderate + critical`.
    pub total: usize,
    pub unlabeled: usize,
}

impl SeverityStats {
    pub fn from_records(records: &[QaRecord]) -> Self {
        let mut s = SeverityStats::default();
        for r in records {
            match r.severity {
                Some(SeverityLabel::Mild) => s.mild += 1,
                Some(SeverityLabel::Moderate) => s.moderate += 1,
                Some(SeverityLabel::Critical) => s.critical += 1,
                None => s.unlabeled += 1,
            }
        }
        s.total = s.mild + s.moderate + s.critical;
        s
    }

    pub fn count(&self, label: SeverityLabel) -> usize {
        match label {
            SeverityLabel::Mild => self.mild,
            SeverityLabel::Moderate => self.moderate,
            SeverityLabel::Critical => self.critical,
        }
    }
}

impl std::fmt::Display for SeverityStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "mild={} moderate={} critical={} total={}",
            self.mild, self.moderate, self.critical, self.total
        )?;
        if self.unlabeled > 0 {
            write!(f, " unlabeled={}", self.unlabeled)?;
        }
        Ok(())
    }
}

pub fn stats(records: &[QaRecord]) -> SeverityStats {
    SeverityStats::from_records(records)
}

/// Parses JSONL text. Ids are assigned `0..N` in line order; blank lines are skipped.
pub fn parse_jsonl<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<QaRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line)
            .map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        let severity = match parsed.severity.as_deref() {
            None => None,
            Some(s) => Some(
                s.parse::<SeverityLabel>()
                    .map_err(|msg| Error::parse(source_name, lineno, msg))?,
            ),
        };
        if normalize(&parsed.question).is_empty() {
            return Err(Error::parse(source_name, lineno, "question is empty after normalization"));
        }
        if normalize(&parsed.answer).is_empty() {
            return Err(Error::parse(source_name, lineno, "answer is empty after normalization"));
        }
        records.push(QaRecord {
            id: records.len() as u64,
            question: parsed.question.into_owned(),
            answer: parsed.answer.into_owned(),
            severity,
        });
    }
    Ok(records)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<QaRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file), &path.display().to_string())
}

pub fn record_to_json_line(record: &QaRecord) -> String {
    let line = RecordLine {
        question: record.question.as_str().into(),
        answer: record.answer.as_str().into(),
        severity: record.severity.map(|s| s.as_str().into()),
    };
    serde_json::to_string(&line).expect("record serializes")
}

pub fn write_jsonl_to<W: Write>(records: &[QaRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        out.write_all(record_to_json_line(r).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_jsonl(records: &[QaRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl_to(records, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// SHA-256 over the canonical JSONL serialization (ids included), hex encoded.
pub fn dataset_hash(records: &[QaRecord]) -> String {
    let mut hasher = Sha256::new();
    for r in records {
        hasher.update(r.id.to_le_bytes());
        hasher.update(record_to_json_line(r).as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_empty() {
        assert!(parse_jsonl("".as_bytes(), "t").unwrap().is_empty());
    }

    #[test]
    fn one_line_gets_id_zero() {
        let recs = parse_jsonl(r#"{"question":"س","answer":"ج"}"#.as_bytes(), "t").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].id, 0);
        assert_eq!(recs[0].severity, None);
    }

    #[test]
    fn unknown_severity_reports_line() {
        let text = "{\"question\":\"a\",\"answer\":\"b\"}\n{\"question\":\"a\",\"answer\":\"b\",\"severity\":\"Severe\"}\n";
        match parse_jsonl(text.as_bytes(), "f.jsonl") {
            Err(Error::Parse { line, source_name, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(source_name, "f.jsonl");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "{\"question\":\"a\",\"answer\":\"b\"}\n\n{oops\n";
        assert!(matches!(
            parse_jsonl(text.as_bytes(), "f"),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn blank_question_rejected() {
        let text = r#"{"question":"؟ ،","answer":"b"}"#;
        assert!(matches!(parse_jsonl(text.as_bytes(), "f"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn extra_fields_ignored_and_severity_lowercase_on_disk() {
        let text = r#"{"question":"q","answer":"a","severity":"critical","source":"maqa"}"#;
        let recs = parse_jsonl(text.as_bytes(), "f").unwrap();
        assert_eq!(recs[0].severity, Some(SeverityLabel::Critical));
        assert_eq!(
            record_to_json_line(&recs[0]),
            r#"{"question":"q","answer":"a","severity":"critical"}"#
        );
    }

    #[test]
    fn stats_partition() {
        let recs = vec![
            QaRecord::new(0, "a", "b").with_severity(SeverityLabel::Mild),
            QaRecord::new(1, "a", "b"),
            QaRecord::new(2, "a", "b").with_severity(SeverityLabel::Critical),
        ];
        let s = stats(&recs);
        assert_eq!((s.mild, s.moderate, s.critical, s.total, s.unlabeled), (1, 0, 1, 2, 1));
    }
}
