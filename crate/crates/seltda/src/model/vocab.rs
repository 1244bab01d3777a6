//! Closed vocabulary and the whitespace tokenizer.
//!
//! The token inventory is a pure function of the worlds a run touches:
//! template words, attribute surface words (source and shifted domain),
//! numerals, fact words, caption words, the QA template markers, and the
//! two punctuation tokens. Trailing `?` and `.` split off as their own
//! tokens so the serialized QA grammar round-trips through token ids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthworld::{make_shifted_domain, template_words, WorldSpec, CAPTION_WORDS};
use crate::templating::QA_MARKERS;

/// Reserved token ids. SEP is reserved for symmetry with common vocab
/// layouts but nothing in this pipeline emits it.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Punctuation that splits off the end of a word as its own token.
const SPLIT_PUNCT: [char; 2] = ['?', '.'];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
}

/// Bijective word ↔ id mapping with fixed reserved ids 0–3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary for a world: every string the pipeline can
    /// tokenize, including the shifted-domain sibling's surface words so a
    /// trained model can be evaluated under domain shift without OOVs.
    pub fn for_world(spec: &WorldSpec) -> Vocabulary {
        let mut words: Vec<String> = Vec::new();
        words.extend(QA_MARKERS.iter().map(|w| w.to_string()));
        words.push("?".to_string());
        words.push(".".to_string());
        words.extend(template_words().iter().map(|w| w.to_string()));
        words.extend(spec.surface_words());
        words.extend(make_shifted_domain(spec).surface_words());
        words.extend(CAPTION_WORDS.iter().map(|w| w.to_string()));
        words.push("yes".to_string());
        words.push("no".to_string());
        Vocabulary::from_words(words)
    }

    /// Deduplicates, sorts, and assigns ids after the reserved block.
    fn from_words(mut words: Vec<String>) -> Vocabulary {
        words.sort();
        words.dedup();
        let mut all: Vec<String> = RESERVED.iter().map(|w| w.to_string()).collect();
        all.extend(words);
        let index = all.iter().enumerate().map(|(id, w)| (w.clone(), id)).collect();
        Vocabulary { words: all, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(id, w)| (w.clone(), id)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word_of(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Splits on whitespace, peeling trailing `?`/`.` into separate tokens.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        let mut ids = Vec::new();
        for raw in text.split_whitespace() {
            let mut word = raw;
            let mut peeled = Vec::new();
            while let Some(stripped) = word.strip_suffix(SPLIT_PUNCT) {
                peeled.push(&word[word.len() - 1..]);
                word = stripped;
            }
            if !word.is_empty() {
                ids.push(self.lookup(word)?);
            }
            for punct in peeled.into_iter().rev() {
                ids.push(self.lookup(punct)?);
            }
        }
        Ok(ids)
    }

    fn lookup(&self, word: &str) -> Result<usize, VocabError> {
        self.id_of(word).ok_or_else(|| VocabError::UnknownWord(word.to_string()))
    }

    /// Inverse of [`Vocabulary::tokenize`]: punctuation tokens attach to the
    /// preceding word, everything else is space-separated. Reserved tokens
    /// are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id < RESERVED.len() {
                continue;
            }
            let word = self.word_of(id);
            let is_punct = word.len() == 1 && word.chars().all(|c| SPLIT_PUNCT.contains(&c));
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(word);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templating::{serialize_qa, QAPair};

    fn vocab() -> Vocabulary {
        Vocabulary::for_world(&WorldSpec::default_world())
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = vocab();
        assert_eq!(v.id_of("<pad>"), Some(PAD));
        assert_eq!(v.id_of("<bos>"), Some(BOS));
        assert_eq!(v.id_of("<eos>"), Some(EOS));
        assert_eq!(v.id_of("<sep>"), Some(SEP));
    }

    #[test]
    fn mapping_is_bijective() {
        let v = vocab();
        for id in 0..v.len() {
            assert_eq!(v.id_of(v.word_of(id)), Some(id));
        }
    }

    #[test]
    fn serialized_qa_round_trips_through_tokens() {
        let v = vocab();
        let pair = QAPair::new("how many spheres", "2").unwrap();
        let text = serialize_qa(&pair).0;
        let ids = v.tokenize(&text).unwrap();
        assert_eq!(v.detokenize(&ids), text);
    }

    #[test]
    fn punctuation_splits_off_the_preceding_word() {
        let v = vocab();
        let ids = v.tokenize("spheres?").unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(v.word_of(ids[0]), "spheres");
        assert_eq!(v.word_of(ids[1]), "?");
    }

    #[test]
    fn markers_keep_their_colon() {
        let v = vocab();
        let ids = v.tokenize("Question: Answer:").unwrap();
        assert_eq!(v.word_of(ids[0]), "Question:");
        assert_eq!(v.word_of(ids[1]), "Answer:");
    }

    #[test]
    fn captions_and_probes_tokenize() {
        let v = vocab();
        assert!(v.tokenize("this is a small red cube and a large blue owl.").is_ok());
        assert!(v.tokenize("is this a small red cube?").is_ok());
    }

    #[test]
    fn shifted_domain_questions_tokenize() {
        let v = vocab();
        let shifted = make_shifted_domain(&WorldSpec::default_world());
        for color in &shifted.color_vocab {
            assert!(v.id_of(color).is_some(), "missing shifted color {color}");
        }
        for size in &shifted.size_vocab {
            assert!(v.id_of(size).is_some(), "missing shifted size {size}");
        }
    }

    #[test]
    fn numerals_are_single_tokens() {
        let v = vocab();
        let cells = WorldSpec::default_world().cells();
        for n in 0..=cells {
            assert!(v.id_of(&n.to_string()).is_some(), "missing numeral {n}");
        }
    }

    #[test]
    fn unknown_words_are_reported() {
        let v = vocab();
        assert_eq!(
            v.tokenize("what color is the dragon"),
            Err(VocabError::UnknownWord("dragon".to_string()))
        );
    }

    #[test]
    fn detokenize_drops_reserved_tokens() {
        let v = vocab();
        let mut ids = vec![BOS];
        ids.extend(v.tokenize("yes.").unwrap());
        ids.push(EOS);
        ids.push(PAD);
        assert_eq!(v.detokenize(&ids), "yes.");
    }

    #[test]
    fn vocabulary_is_deterministic_and_serializable() {
        let a = vocab();
        let b = vocab();
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        let mut back: Vocabulary = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(back, a);
        assert_eq!(back.id_of("cube"), a.id_of("cube"));
    }
}
