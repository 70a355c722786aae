//! QA instances, the marker-token input layout, and dataset I/O.
//!
//! Every example is flattened into one sequence
//! `[<s>, q.., </s>, s1.., </s>, s2.., ..., </s>, sM..]`. The `<s>` token at
//! position 0 stands for the question; the `</s>` immediately before sentence
//! `j` stands for sentence `j`.

mod format;
mod synth;
mod vocab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{parse_dataset, to_native_jsonl, DatasetFormat};
pub use synth::{generate_synthetic, SynthConfig};
pub use vocab::{Vocabulary, PAD_ID, QUESTION_MARKER_ID, SENTENCE_MARKER_ID, UNK_ID};

/// A question type label with its contiguous index `0..K`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuestionType {
    pub id: usize,
    pub label: String,
}

/// The ordered set of question types known to a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTypes {
    labels: Vec<String>,
}

impl QuestionTypes {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::Config(
                "at least one question type is required".into(),
            ));
        }
        let unique: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
        if unique.len() != labels.len() {
            return Err(Error::Config(format!(
                "duplicate question type labels in {labels:?}"
            )));
        }
        if labels.iter().any(|l| l.is_empty() || l.contains(',')) {
            return Err(Error::Config(
                "question type labels must be non-empty and comma-free".into(),
            ));
        }
        Ok(Self { labels })
    }

    /// HotpotQA answer classes.
    pub fn hotpot() -> Self {
        Self::new(["yes", "no", "span"]).expect("static labels")
    }

    /// QAsper answer classes.
    pub fn qasper() -> Self {
        Self::new(["extractive", "abstractive", "boolean", "none"]).expect("static labels")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, id: usize) -> Option<QuestionType> {
        self.labels.get(id).map(|label| QuestionType {
            id,
            label: label.clone(),
        })
    }

    pub fn lookup(&self, label: &str) -> Option<QuestionType> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|id| QuestionType {
                id,
                label: label.to_string(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = QuestionType> + '_ {
        self.labels
            .iter()
            .enumerate()
            .map(|(id, label)| QuestionType {
                id,
                label: label.clone(),
            })
    }
}

/// One long-context QA example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub question: Vec<String>,
    pub sentences: Vec<Vec<String>>,
    pub evidence: BTreeSet<usize>,
    pub qtype: QuestionType,
    pub answerable: bool,
    /// Carried through I/O only; no component consumes it.
    pub answer: Option<String>,
}

impl QaInstance {
    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    /// Whether the contrastive objective applies: answerable with at least
    /// one evidence sentence. Other instances still feed the QA loss.
    pub fn qe_eligible(&self) -> bool {
        self.answerable && !self.evidence.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() {
            return Err(Error::MalformedInstance(format!(
                "{}: empty question",
                self.id
            )));
        }
        if self.sentences.is_empty() {
            return Err(Error::MalformedInstance(format!(
                "{}: no context sentences",
                self.id
            )));
        }
        if let Some(&bad) = self.evidence.iter().find(|&&j| j >= self.sentences.len()) {
            return Err(Error::MalformedInstance(format!(
                "{}: evidence index {bad} out of range for {} sentences",
                self.id,
                self.sentences.len()
            )));
        }
        Ok(())
    }
}

/// A dataset together with its question-type registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub types: QuestionTypes,
    pub instances: Vec<QaInstance>,
}

/// Token ids of one assembled example plus the positions of its markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerSequence {
    pub tokens: Vec<u32>,
    pub question_marker_pos: usize,
    pub sentence_marker_pos: Vec<usize>,
    pub qtype: QuestionType,
    pub evidence: BTreeSet<usize>,
}

impl MarkerSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_sentences(&self) -> usize {
        self.sentence_marker_pos.len()
    }
}

/// Lays out `[<s>, q, </s>, s1, </s>, s2, ..., </s>, sM]`.
pub fn assemble_sequence(inst: &QaInstance, vocab: &Vocabulary) -> Result<MarkerSequence> {
    if inst.question.is_empty() {
        return Err(Error::MalformedInstance(format!(
            "{}: empty question",
            inst.id
        )));
    }
    if inst.sentences.is_empty() {
        return Err(Error::MalformedInstance(format!(
            "{}: empty sentence list",
            inst.id
        )));
    }
    let total = 1 + inst.question.len() + inst.sentences.iter().map(|s| s.len() + 1).sum::<usize>();
    let mut tokens = Vec::with_capacity(total);
    tokens.push(QUESTION_MARKER_ID);
    tokens.extend(inst.question.iter().map(|t| vocab.id(t)));
    let mut sentence_marker_pos = Vec::with_capacity(inst.sentences.len());
    for sentence in &inst.sentences {
        sentence_marker_pos.push(tokens.len());
        tokens.push(SENTENCE_MARKER_ID);
        tokens.extend(sentence.iter().map(|t| vocab.id(t)));
    }
    Ok(MarkerSequence {
        tokens,
        question_marker_pos: 0,
        sentence_marker_pos,
        qtype: inst.qtype.clone(),
        evidence: inst.evidence.clone(),
    })
}

/// An instance paired with its assembled sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub instance: QaInstance,
    pub sequence: MarkerSequence,
}

pub fn prepare(instances: &[QaInstance], vocab: &Vocabulary) -> Result<Vec<Encoded>> {
    instances
        .iter()
        .map(|inst| {
            inst.validate()?;
            Ok(Encoded {
                instance: inst.clone(),
                sequence: assemble_sequence(inst, vocab)?,
            })
        })
        .collect()
}

/// Whitespace split, lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(question: &str, sentences: &[&str]) -> QaInstance {
        QaInstance {
            id: "x".into(),
            question: tokenize(question),
            sentences: sentences.iter().map(|s| tokenize(s)).collect(),
            evidence: BTreeSet::new(),
            qtype: QuestionTypes::hotpot().get(2).unwrap(),
            answerable: true,
            answer: None,
        }
    }

    #[test]
    fn layout_matches_marker_scheme() {
        let i = inst("a", &["b", "c"]);
        let vocab = Vocabulary::build([&i]);
        let seq = assemble_sequence(&i, &vocab).unwrap();
        let (a, b, c) = (vocab.id("a"), vocab.id("b"), vocab.id("c"));
        assert_eq!(
            seq.tokens,
            vec![
                QUESTION_MARKER_ID,
                a,
                SENTENCE_MARKER_ID,
                b,
                SENTENCE_MARKER_ID,
                c
            ]
        );
        assert_eq!(seq.question_marker_pos, 0);
        assert_eq!(seq.sentence_marker_pos, vec![2, 4]);
    }

    #[test]
    fn single_sentence_counts() {
        let i = inst("x y z", &["p q r s"]);
        let vocab = Vocabulary::build([&i]);
        let seq = assemble_sequence(&i, &vocab).unwrap();
        assert_eq!(seq.len(), 3 + 1 + 1 + 4);
        let markers = seq
            .tokens
            .iter()
            .filter(|&&t| t == QUESTION_MARKER_ID || t == SENTENCE_MARKER_ID)
            .count();
        assert_eq!(markers, 2);
    }

    #[test]
    fn ten_sentences_markers_found_by_scan() {
        let sentences: Vec<String> = (0..10).map(|j| format!("w{j} v{j} u")).collect();
        let refs: Vec<&str> = sentences.iter().map(String::as_str).collect();
        let i = inst("what is it", &refs);
        let vocab = Vocabulary::build([&i]);
        let seq = assemble_sequence(&i, &vocab).unwrap();
        let scanned: Vec<usize> = seq
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == QUESTION_MARKER_ID || t == SENTENCE_MARKER_ID)
            .map(|(p, _)| p)
            .collect();
        assert_eq!(scanned.len(), 11);
        assert_eq!(scanned[0], seq.question_marker_pos);
        assert_eq!(&scanned[1..], seq.sentence_marker_pos.as_slice());
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let i = inst("a", &["b"]);
        let vocab = Vocabulary::build([&i]);
        let other = inst("zzz", &["b"]);
        let seq = assemble_sequence(&other, &vocab).unwrap();
        assert_eq!(seq.tokens[1], UNK_ID);
    }

    #[test]
    fn empty_question_or_sentences_rejected() {
        let vocab = Vocabulary::build(std::iter::empty::<&QaInstance>());
        let mut i = inst("a", &["b"]);
        i.question.clear();
        assert!(matches!(
            assemble_sequence(&i, &vocab),
            Err(Error::MalformedInstance(_))
        ));
        let mut i = inst("a", &["b"]);
        i.sentences.clear();
        assert!(matches!(
            assemble_sequence(&i, &vocab),
            Err(Error::MalformedInstance(_))
        ));
    }

    #[test]
    fn type_registry_rejects_duplicates() {
        assert!(QuestionTypes::new(["a", "a"]).is_err());
        assert!(QuestionTypes::new(Vec::<String>::new()).is_err());
        let t = QuestionTypes::new(["a", "b"]).unwrap();
        assert_eq!(t.lookup("b").unwrap().id, 1);
        assert!(t.lookup("c").is_none());
    }
}
