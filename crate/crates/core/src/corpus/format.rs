//! Line-delimited dataset formats.
//!
//! The native format is one JSON object per line:
//!
//! ```text
//! {"question_types": ["yes", "no", "span"]}              <- optional header
//! {"id": "..", "question": "..", "question_type": "span",
//!  "sentences": [".."], "evidence": [0, 2], "answerable": true, "answer": null}
//! ```
//!
//! Hotpot-like and qasper-like records are mapped onto the same fields.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{tokenize, Dataset, QaInstance, QuestionTypes};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[cfg_attr(feature = "cli", derive(clap::ValueEnum))]
pub enum DatasetFormat {
    Native,
    HotpotLike,
    QasperLike,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeRecord {
    id: String,
    question: String,
    question_type: String,
    sentences: Vec<String>,
    evidence: Vec<usize>,
    answerable: bool,
    answer: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeHeader {
    question_types: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct HotpotRecord {
    #[serde(rename = "_id")]
    id: String,
    question: String,
    answer: String,
    /// `[title, [sentence, ...]]` pairs.
    context: Vec<(String, Vec<String>)>,
    /// `[title, sentence index within that paragraph]` pairs.
    supporting_facts: Vec<(String, usize)>,
}

#[derive(Debug, Deserialize)]
struct QasperRecord {
    question_id: String,
    question: String,
    paragraphs: Vec<String>,
    answer: QasperAnswer,
}

#[derive(Debug, Deserialize)]
struct QasperAnswer {
    #[serde(default)]
    unanswerable: bool,
    #[serde(default)]
    yes_no: Option<bool>,
    #[serde(default)]
    extractive_spans: Vec<String>,
    #[serde(default)]
    free_form_answer: String,
    #[serde(default)]
    evidence: Vec<String>,
}

/// Parses a line-delimited dataset. `types` fixes the question-type registry;
/// when absent, a native header line or the format's default set is used.
pub fn parse_dataset(
    bytes: &[u8],
    format: DatasetFormat,
    types: Option<&QuestionTypes>,
) -> Result<Dataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1 + bytes[..e.valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count(),
        message: format!("invalid utf-8: {e}"),
    })?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();

    let mut registry = types.cloned();
    if format == DatasetFormat::Native {
        if let Some(&(line, first)) = lines.peek() {
            if let Ok(header) = serde_json::from_str::<NativeHeader>(first) {
                let declared =
                    QuestionTypes::new(header.question_types).map_err(|e| Error::Schema {
                        line,
                        message: e.to_string(),
                    })?;
                if let Some(given) = &registry {
                    if *given != declared {
                        return Err(Error::Schema {
                            line,
                            message: format!(
                                "header declares types {:?} but {:?} were requested",
                                declared.labels(),
                                given.labels()
                            ),
                        });
                    }
                }
                registry = Some(declared);
                lines.next();
            }
        }
    }
    let types = registry.unwrap_or_else(|| match format {
        DatasetFormat::Native | DatasetFormat::HotpotLike => QuestionTypes::hotpot(),
        DatasetFormat::QasperLike => QuestionTypes::qasper(),
    });

    let mut instances = Vec::new();
    for (line, raw) in lines {
        let inst = match format {
            DatasetFormat::Native => native_instance(raw, line, &types)?,
            DatasetFormat::HotpotLike => hotpot_instance(raw, line, &types)?,
            DatasetFormat::QasperLike => qasper_instance(raw, line, &types)?,
        };
        instances.push(inst);
    }
    Ok(Dataset { types, instances })
}

fn decode<'a, T: Deserialize<'a>>(raw: &'a str, line: usize) -> Result<T> {
    serde_json::from_str(raw).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

#[allow(clippy::too_many_arguments)]
fn build_instance(
    line: usize,
    types: &QuestionTypes,
    id: String,
    question: &str,
    qtype: &str,
    sentences: Vec<Vec<String>>,
    evidence: BTreeSet<usize>,
    answerable: bool,
    answer: Option<String>,
) -> Result<QaInstance> {
    let schema = |message: String| Error::Schema { line, message };
    let qtype = types.lookup(qtype).ok_or_else(|| {
        schema(format!(
            "unknown question type {qtype:?} (known: {:?})",
            types.labels()
        ))
    })?;
    let inst = QaInstance {
        id,
        question: tokenize(question),
        sentences,
        evidence,
        qtype,
        answerable,
        answer,
    };
    if inst.question.is_empty() {
        return Err(schema(format!("{}: empty question", inst.id)));
    }
    if inst.sentences.is_empty() {
        return Err(schema(format!("{}: empty sentence list", inst.id)));
    }
    if let Some(&j) = inst.evidence.iter().find(|&&j| j >= inst.sentences.len()) {
        return Err(schema(format!(
            "{}: evidence index {j} out of range for {} sentences",
            inst.id,
            inst.sentences.len()
        )));
    }
    Ok(inst)
}

fn native_instance(raw: &str, line: usize, types: &QuestionTypes) -> Result<QaInstance> {
    let r: NativeRecord = decode(raw, line)?;
    build_instance(
        line,
        types,
        r.id,
        &r.question,
        &r.question_type,
        r.sentences.iter().map(|s| tokenize(s)).collect(),
        r.evidence.into_iter().collect(),
        r.answerable,
        r.answer,
    )
}

fn hotpot_instance(raw: &str, line: usize, types: &QuestionTypes) -> Result<QaInstance> {
    let r: HotpotRecord = decode(raw, line)?;
    let mut offsets = BTreeMap::new();
    let mut sentences = Vec::new();
    for (title, sents) in &r.context {
        offsets.insert(title.as_str(), (sentences.len(), sents.len()));
        sentences.extend(sents.iter().map(|s| tokenize(s)));
    }
    let mut evidence = BTreeSet::new();
    for (title, idx) in &r.supporting_facts {
        let &(offset, len) = offsets.get(title.as_str()).ok_or_else(|| Error::Schema {
            line,
            message: format!("supporting fact references unknown title {title:?}"),
        })?;
        if *idx >= len {
            return Err(Error::Schema {
                line,
                message: format!(
                    "supporting fact index {idx} out of range for {title:?} ({len} sentences)"
                ),
            });
        }
        evidence.insert(offset + idx);
    }
    let label = match r.answer.trim().to_lowercase().as_str() {
        "yes" => "yes",
        "no" => "no",
        _ => "span",
    };
    build_instance(
        line,
        types,
        r.id,
        &r.question,
        label,
        sentences,
        evidence,
        true,
        Some(r.answer),
    )
}

fn qasper_instance(raw: &str, line: usize, types: &QuestionTypes) -> Result<QaInstance> {
    let r: QasperRecord = decode(raw, line)?;
    let a = &r.answer;
    let mut evidence = BTreeSet::new();
    for text in &a.evidence {
        let j = r
            .paragraphs
            .iter()
            .position(|p| p == text)
            .ok_or_else(|| Error::Schema {
                line,
                message: format!("evidence text not found among paragraphs: {text:?}"),
            })?;
        evidence.insert(j);
    }
    let (label, answer) = if a.unanswerable {
        ("none", None)
    } else if let Some(yes) = a.yes_no {
        ("boolean", Some(if yes { "yes" } else { "no" }.to_string()))
    } else if !a.extractive_spans.is_empty() {
        ("extractive", Some(a.extractive_spans.join(" ")))
    } else {
        ("abstractive", Some(a.free_form_answer.clone()))
    };
    build_instance(
        line,
        types,
        r.question_id,
        &r.question,
        label,
        r.paragraphs.iter().map(|p| tokenize(p)).collect(),
        evidence,
        !a.unanswerable,
        answer,
    )
}

/// Writes the native format, header line first.
pub fn to_native_jsonl(dataset: &Dataset) -> String {
    let mut out = serde_json::to_string(&NativeHeader {
        question_types: dataset.types.labels().to_vec(),
    })
    .expect("header serializes");
    out.push('\n');
    for inst in &dataset.instances {
        let record = NativeRecord {
            id: inst.id.clone(),
            question: inst.question.join(" "),
            question_type: inst.qtype.label.clone(),
            sentences: inst.sentences.iter().map(|s| s.join(" ")).collect(),
            evidence: inst.evidence.iter().copied().collect(),
            answerable: inst.answerable,
            answer: inst.answer.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{"id":"q1","question":"Who Wrote it","question_type":"span","sentences":["a b","c d","e f","g h"],"evidence":[1,3],"answerable":true,"answer":"x"}"#;

    #[test]
    fn empty_input_is_empty() {
        let d = parse_dataset(b"", DatasetFormat::Native, None).unwrap();
        assert!(d.instances.is_empty());
        let d = parse_dataset(b"\n\n", DatasetFormat::HotpotLike, None).unwrap();
        assert!(d.instances.is_empty());
    }

    #[test]
    fn native_record_parses() {
        let d = parse_dataset(ONE.as_bytes(), DatasetFormat::Native, None).unwrap();
        assert_eq!(d.instances.len(), 1);
        let inst = &d.instances[0];
        assert_eq!(inst.evidence.len(), 2);
        assert_eq!(inst.question, vec!["who", "wrote", "it"]);
        assert_eq!(inst.qtype.label, "span");
        assert!(inst.qe_eligible());
    }

    #[test]
    fn out_of_range_evidence_rejected_with_line() {
        let bad = ONE.replace("[1,3]", "[4]");
        let input = format!("{ONE}\n{bad}\n");
        match parse_dataset(input.as_bytes(), DatasetFormat::Native, None) {
            Err(Error::Schema { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("out of range"), "{message}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_type_is_schema_error() {
        let bad = ONE.replace("\"span\"", "\"multiple-choice\"");
        assert!(matches!(
            parse_dataset(bad.as_bytes(), DatasetFormat::Native, None),
            Err(Error::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn malformed_json_is_parse_error() {
        let input = format!("{ONE}\n\n{{\"id\": 3\n");
        assert!(matches!(
            parse_dataset(input.as_bytes(), DatasetFormat::Native, None),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn header_defines_registry() {
        let input = format!(
            "{{\"question_types\":[\"t0\",\"t1\"]}}\n{}",
            ONE.replace("\"span\"", "\"t1\"")
        );
        let d = parse_dataset(input.as_bytes(), DatasetFormat::Native, None).unwrap();
        assert_eq!(d.types.labels(), ["t0", "t1"]);
        assert_eq!(d.instances[0].qtype.id, 1);
        let other = QuestionTypes::new(["t1", "t0"]).unwrap();
        assert!(parse_dataset(input.as_bytes(), DatasetFormat::Native, Some(&other)).is_err());
    }

    #[test]
    fn unanswerable_flagged_not_dropped() {
        let r = ONE
            .replace("\"answerable\":true", "\"answerable\":false")
            .replace("[1,3]", "[]");
        let d = parse_dataset(r.as_bytes(), DatasetFormat::Native, None).unwrap();
        assert_eq!(d.instances.len(), 1);
        assert!(!d.instances[0].qe_eligible());
    }

    #[test]
    fn hotpot_adapter_flattens_paragraphs() {
        let rec = r#"{"_id":"h1","question":"Is it?","answer":"yes","type":"comparison",
            "context":[["A",["a one","a two"]],["B",["b one","b two","b three"]]],
            "supporting_facts":[["A",1],["B",2]]}"#
            .replace('\n', " ");
        let d = parse_dataset(rec.as_bytes(), DatasetFormat::HotpotLike, None).unwrap();
        let inst = &d.instances[0];
        assert_eq!(inst.sentences.len(), 5);
        assert_eq!(
            inst.evidence.iter().copied().collect::<Vec<_>>(),
            vec![1, 4]
        );
        assert_eq!(inst.qtype.label, "yes");

        let bad = rec.replace("[\"B\",2]", "[\"B\",3]");
        assert!(matches!(
            parse_dataset(bad.as_bytes(), DatasetFormat::HotpotLike, None),
            Err(Error::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn qasper_adapter_maps_answer_types() {
        let rec = r#"{"question_id":"p1","question":"What data?","paragraphs":["we use x","results"],"answer":{"unanswerable":false,"extractive_spans":["x"],"evidence":["we use x"]}}"#;
        let none = r#"{"question_id":"p2","question":"Why?","paragraphs":["p"],"answer":{"unanswerable":true}}"#;
        let input = format!("{rec}\n{none}\n");
        let d = parse_dataset(input.as_bytes(), DatasetFormat::QasperLike, None).unwrap();
        assert_eq!(d.instances[0].qtype.label, "extractive");
        assert_eq!(
            d.instances[0].evidence.iter().copied().collect::<Vec<_>>(),
            vec![0]
        );
        assert_eq!(d.instances[1].qtype.label, "none");
        assert!(!d.instances[1].qe_eligible());
    }
}
