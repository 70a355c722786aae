use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::QaInstance;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
/// `<s>`, the question marker.
pub const QUESTION_MARKER_ID: u32 = 2;
/// `</s>`, the sentence marker.
pub const SENTENCE_MARKER_ID: u32 = 3;
const RESERVED: u32 = 4;

/// Bijective token/id map. Ids `0..4` are reserved and never assigned to
/// corpus tokens, so a literal `"<s>"` in text is an ordinary token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    reserved: Vec<String>,
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(file: VocabFile) -> Self {
        Self::from_tokens(file.tokens)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            reserved: ["<pad>", "<unk>", "<s>", "</s>"].map(String::from).to_vec(),
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Collects every question and sentence token, assigned in sorted order.
    pub fn build<'a>(instances: impl IntoIterator<Item = &'a QaInstance>) -> Self {
        let mut set = BTreeSet::new();
        for inst in instances {
            set.extend(inst.question.iter().cloned());
            for s in &inst.sentences {
                set.extend(s.iter().cloned());
            }
        }
        Self::from_tokens(set.into_iter().collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + RESERVED))
            .collect();
        Self { tokens, index }
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            UNK_ID => Some("<unk>"),
            QUESTION_MARKER_ID => Some("<s>"),
            SENTENCE_MARKER_ID => Some("</s>"),
            _ => self
                .tokens
                .get((id - RESERVED) as usize)
                .map(String::as_str),
        }
    }

    /// Total id space, reserved ids included.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED as usize
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, QuestionTypes};

    #[test]
    fn reserved_ids_disjoint_and_bijective() {
        let inst = QaInstance {
            id: "a".into(),
            question: tokenize("<s> hello"),
            sentences: vec![tokenize("hello </s> world")],
            evidence: Default::default(),
            qtype: QuestionTypes::hotpot().get(0).unwrap(),
            answerable: true,
            answer: None,
        };
        let v = Vocabulary::build([&inst]);
        assert_eq!(v.len(), 4 + 4);
        for t in ["<s>", "</s>", "hello", "world"] {
            let id = v.id(t);
            assert!(id >= RESERVED);
            assert_eq!(v.token(id), Some(t));
        }
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
